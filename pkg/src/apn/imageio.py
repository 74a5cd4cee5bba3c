"""Binary PGM/PPM images, raw float32 image files and TSV manifests."""

from __future__ import annotations

import os
import re
from typing import Iterable, Sequence

import numpy as np

from apn.synth import Dataset

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


class ImageFormatError(ValueError):
    pass


def parse_pnm(data: bytes) -> np.ndarray:
    """Decode P5 (grey) or P6 (RGB) bytes to ``H x W`` or ``H x W x 3`` uint8/uint16."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("truncated PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM type {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PNM header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PNM header {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height * channels
    raster = data[pos : pos + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise ImageFormatError("PNM raster is truncated")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint8 if maxval < 256 else np.uint16)
    return arr.reshape((height, width, 3) if channels == 3 else (height, width))


def read_pnm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pnm(fh.read())


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ImageFormatError("only 8-bit images are written")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode image of shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def write_pnm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma (0.299, 0.587, 0.114) of an RGB image; grey images pass through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114


def unit_to_u8(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to 0..255 by rounding."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# TSV


def read_tsv(path: str) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            rows.append(line.split("\t"))
    return rows


def write_tsv(path: str, rows: Iterable[Sequence], header: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("#" + "\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


# --------------------------------------------------------------------------
# datasets on disk: raw little-endian float32 C x H x W files plus a manifest


MANIFEST = "manifest.tsv"


def write_dataset(dataset: Dataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    c, h, w = dataset.images.shape[1:]
    rows = []
    for i, (img, fine, coarse) in enumerate(zip(dataset.images, dataset.labels, dataset.coarse)):
        name = f"img_{i:06d}.f32"
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
        rows.append((name, int(fine), int(coarse)))
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write(f"# dims {c} {h} {w}\n")
        fh.write(f"# classes {dataset.num_classes}\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def read_dataset(directory: str) -> Dataset:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    dims = None
    num_classes = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# dims"):
                dims = tuple(int(v) for v in line.split()[2:5])
            elif line.startswith("# classes"):
                num_classes = int(line.split()[2])
            elif line.strip() and not line.startswith("#"):
                rows.append(line.split("\t"))
    if dims is None:
        raise ImageFormatError(f"{path} lacks a '# dims C H W' header")
    images, fine, coarse = [], [], []
    for row in rows:
        if len(row) != 3:
            raise ImageFormatError(f"manifest row {row!r} needs path, fine label, coarse label")
        raw = np.fromfile(os.path.join(directory, row[0]), dtype="<f4")
        if raw.size != int(np.prod(dims)):
            raise ImageFormatError(f"{row[0]} holds {raw.size} values, expected {int(np.prod(dims))}")
        images.append(raw.reshape(dims).astype(np.float32))
        fine.append(int(row[1]))
        coarse.append(int(row[2]))
    labels = np.asarray(fine, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    stack = np.stack(images) if images else np.zeros((0, *dims), np.float32)
    return Dataset(stack, labels, np.asarray(coarse, dtype=np.int64), num_classes)
