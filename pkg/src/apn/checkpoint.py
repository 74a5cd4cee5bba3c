"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"APNCKPT1"
    u32 tensor count
    per tensor:
        u32 name length, UTF-8 name
        u8  dtype tag (0 = float32, 1 = float64)
        u32 rank, u32 dims[rank]
        raw little-endian payload
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Sequence, Union

import numpy as np

MAGIC = b"APNCKPT1"
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


def encode(tensors: Sequence[tuple[str, np.ndarray]]) -> bytes:
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise CheckpointError("tensor names must be unique")
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _TAG_OF[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[_TAG_OF[arr.dtype]]).tobytes())
    return b"".join(parts)


def _take(buf: memoryview, pos: int, n: int, what: str) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf[pos : pos + n], pos + n


def decode(data: bytes) -> list[tuple[str, np.ndarray]]:
    buf = memoryview(data)
    head, pos = _take(buf, 0, len(MAGIC), "magic")
    if bytes(head) != MAGIC:
        raise CheckpointError("not an APN checkpoint (bad magic)")
    raw, pos = _take(buf, pos, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    out = []
    for i in range(count):
        raw, pos = _take(buf, pos, 4, f"name length of tensor {i}")
        (nlen,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, nlen, f"name of tensor {i}")
        name = bytes(raw).decode("utf-8")
        raw, pos = _take(buf, pos, 5, f"header of {name}")
        tag, rank = struct.unpack("<BI", raw)
        if tag not in _TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        raw, pos = _take(buf, pos, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw)
        dtype = _TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw, pos = _take(buf, pos, nbytes, f"payload of {name}")
        out.append((name, np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def save(tensors: Sequence[tuple[str, np.ndarray]], path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors))


def load(path: PathLike) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_module(module, path: PathLike) -> None:
    save(module.state(), path)


def load_into(module, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    """Copy checkpoint tensors into ``module``, validating names and dims."""
    expected = module.state()
    got = dict(tensors)
    for name, arr in expected:
        if name not in got:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if got[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has dims {got[name].shape}, model expects {arr.shape}")
    extra = sorted(set(got) - {n for n, _ in expected})
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for name, arr in expected:
        arr[...] = got[name]
