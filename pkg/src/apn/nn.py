"""Parameters, a minimal module tree, and the layers the networks use."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from apn import ops
from apn.rng import SplitMix64
from apn.tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor with a momentum buffer and an initialization rule.

    ``init`` is one of ``"he"`` (normal, std ``sqrt(2 / fan_in)``),
    ``"small"`` (normal, std 0.01), ``"ones"`` or ``"zeros"``.
    """

    __slots__ = ("name", "momentum_buffer", "init", "fan_in")

    def __init__(self, dims, init: str = "zeros", fan_in: int = 1, dtype=np.float32):
        super().__init__(np.zeros(dims, dtype=dtype), requires_grad=True)
        self.name = ""
        self.momentum_buffer: Optional[np.ndarray] = None
        self.init = init
        self.fan_in = fan_in

    def reset(self, rng: SplitMix64) -> None:
        if self.init == "he":
            std = math.sqrt(2.0 / self.fan_in)
            values = rng.normal(self.data.size) * std
            self.data[...] = values.reshape(self.data.shape).astype(self.data.dtype)
        elif self.init == "small":
            values = rng.normal(self.data.size) * 0.01
            self.data[...] = values.reshape(self.data.shape).astype(self.data.dtype)
        elif self.init == "ones":
            self.data[...] = 1
        else:
            self.data[...] = 0
        self.grad = None
        self.momentum_buffer = None


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, child in self._children():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(child, Parameter):
                yield name, child
            else:
                yield from child.named_parameters(name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if key in getattr(self, "_buffer_names", ()):
                yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}.{key}" if prefix else key)

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter then every buffer, in registration order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def init_parameters(self, seed: int) -> None:
        root = SplitMix64(seed)
        for name, p in self.named_parameters():
            p.reset(root.split(name))
        for _, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                mod.running_mean[...] = 0
                mod.running_var[...] = 1

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.momentum_buffer = None
            p.grad = None
        for _, mod in self.named_modules():
            for key in getattr(mod, "_buffer_names", ()):
                setattr(mod, key, getattr(mod, key).astype(dtype))
        return self


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, bias: bool = True, dtype=np.float32):
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.weight = Parameter((cout, cin, k, k), "he", cin * k * k, dtype)
        self.bias = Parameter((cout,), "zeros", dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            ops.conv_output_size(h, self.k, self.stride, self.pad),
            ops.conv_output_size(w, self.k, self.stride, self.pad),
        )

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        return ho * wo * self.cout * self.cin * self.k * self.k


class ConvTranspose2d(Module):
    """Transposed convolution whose output size is fixed by the caller."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 2, pad: int = 1, bias: bool = True, dtype=np.float32):
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.weight = Parameter((cin, cout, k, k), "he", cin * k * k, dtype)
        self.bias = Parameter((cout,), "zeros", dtype=dtype) if bias else None

    def output_pad(self, h_in: int, w_in: int, h: int, w: int) -> tuple[int, int]:
        base_h = ops.conv_transpose_output_size(h_in, self.k, self.stride, self.pad, 0)
        base_w = ops.conv_transpose_output_size(w_in, self.k, self.stride, self.pad, 0)
        op = (h - base_h, w - base_w)
        if not all(0 <= v < self.stride for v in op):
            raise ValueError(
                f"transposed conv cannot map {h_in}x{w_in} to {h}x{w} with stride {self.stride}, pad {self.pad}"
            )
        return op

    def forward(self, x: Tensor, target_hw: tuple[int, int]) -> Tensor:
        op = self.output_pad(x.dims[2], x.dims[3], *target_hw)
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad, op)

    def flops(self, h_in: int, w_in: int) -> int:
        # Every input pixel scatters a full k x k x C_out patch.
        return h_in * w_in * self.cin * self.cout * self.k * self.k


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True, dtype=np.float32, init: str = "he"):
        self.din, self.dout = din, dout
        self.weight = Parameter((dout, din), init, din, dtype)
        self.bias = Parameter((dout,), "zeros", dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def flops(self) -> int:
        return self.din * self.dout


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.c, self.eps, self.momentum = c, eps, momentum
        self.gamma = Parameter((c,), "ones", dtype=dtype)
        self.beta = Parameter((c,), "zeros", dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.eps, self.momentum
        )


def count_parameters(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters()))
