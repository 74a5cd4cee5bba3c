"""Differentiable tensor operations.

Each operation is a :class:`~apn.tensor.Function` subclass with a thin
functional wrapper.  Convolutions use a strided window view of the padded
input followed by a single ``tensordot``; the input gradient scatters the
window gradients back offset by offset, which keeps every reduction in a
fixed order.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from apn.tensor import Function, ShapeError, Tensor

Operand = Union[Tensor, float, int, np.ndarray]


def _as_tensor(value: Operand, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _pair(v: Union[int, Sequence[int]]) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that were broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_dims(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"dims {a} and {b} are not broadcastable") from None


# --------------------------------------------------------------------------
# elementwise


class Add(Function):
    name = "add"

    def forward(self, x, y):
        _broadcast_dims(x.shape, y.shape)
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, x, y):
        _broadcast_dims(x.shape, y.shape)
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, x, y):
        _broadcast_dims(x.shape, y.shape)
        self.x, self.y = x, y
        return x * y

    def backward(self, g):
        return unbroadcast(g * self.y, self.x.shape), unbroadcast(g * self.x, self.y.shape)


def add(x: Operand, y: Operand) -> Tensor:
    x = _as_tensor(x, y) if not isinstance(x, Tensor) else x
    return Add.apply(x, _as_tensor(y, x))


def sub(x: Operand, y: Operand) -> Tensor:
    x = _as_tensor(x, y) if not isinstance(x, Tensor) else x
    return Sub.apply(x, _as_tensor(y, x))


def mul(x: Operand, y: Operand) -> Tensor:
    x = _as_tensor(x, y) if not isinstance(x, Tensor) else x
    return Mul.apply(x, _as_tensor(y, x))


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return (np.where(self.mask, g, 0).astype(g.dtype, copy=False),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        # Split by sign so exp never overflows.
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# --------------------------------------------------------------------------
# reductions and shape manipulation


class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, g):
        return (np.broadcast_to(g / np.prod(self.shape), self.shape).astype(g.dtype),)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array-library name
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


class Reshape(Function):
    name = "reshape"

    def __init__(self, dims):
        self.dims = tuple(dims)

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.dims)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    return Reshape.apply(x, dims=dims)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.dims[0], int(np.prod(x.dims[1:]))))


class Slice(Function):
    name = "slice"

    def __init__(self, axis, start, stop):
        self.axis, self.start, self.stop = axis, start, stop

    def forward(self, x):
        self.in_shape = x.shape
        index = [slice(None)] * x.ndim
        index[self.axis] = slice(self.start, self.stop)
        self.index = tuple(index)
        return x[self.index].copy()

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=g.dtype)
        out[self.index] = g
        return (out,)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.dims[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.dims}")
    return Slice.apply(x, axis=axis, start=start, stop=stop)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(slice_axis(x, axis, start, start + n))
        start += n
    return out


class Concat(Function):
    name = "concat"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != self.axis
            ):
                raise ShapeError(f"cannot concat dims {x.shape} with {ref} along axis {self.axis}")
        self.bounds = np.cumsum([0] + [x.shape[self.axis] for x in xs])
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        parts = []
        for a, b in zip(self.bounds[:-1], self.bounds[1:]):
            index = [slice(None)] * g.ndim
            index[self.axis] = slice(int(a), int(b))
            parts.append(g[tuple(index)].copy())
        return tuple(parts)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, g):
        n, c, h, w = self.shape
        return (np.broadcast_to(g / (h * w), self.shape).astype(g.dtype),)


class ChannelAvgPool(Function):
    name = "channel_avg_pool"

    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=1, keepdims=True)

    def backward(self, g):
        return (np.broadcast_to(g / self.shape[1], self.shape).astype(g.dtype),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: N x C x H x W -> N x C x 1 x 1."""
    return GlobalAvgPool.apply(x)


def channel_avg_pool(x: Tensor) -> Tensor:
    """Cross-channel mean per pixel: N x C x H x W -> N x 1 x H x W."""
    return ChannelAvgPool.apply(x)


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: tuple[int, int], stride: tuple[int, int], out_hw):
    win = sliding_window_view(xp, k, axis=(2, 3))
    ho, wo = out_hw
    return win[:, :, : (ho - 1) * stride[0] + 1 : stride[0], : (wo - 1) * stride[1] + 1 : stride[1]]


def _pad(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    if pad == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))


def _conv_forward(x, w, stride, pad):
    k = w.shape[2:]
    ho = conv_output_size(x.shape[2], k[0], stride[0], pad[0])
    wo = conv_output_size(x.shape[3], k[1], stride[1], pad[1])
    win = _windows(_pad(x, pad), k, stride, (ho, wo))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w, x_shape, stride, pad):
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    n, ci, h, wd = x_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, Ci, kh, kw
    dxp = np.zeros((n, ci, h + 2 * pad[0], wd + 2 * pad[1]), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[
                :, :, i : i + (ho - 1) * stride[0] + 1 : stride[0], j : j + (wo - 1) * stride[1] + 1 : stride[1]
            ] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad[0] : pad[0] + h, pad[1] : pad[1] + wd]


def _conv_weight_grad(g, x, k, stride, pad):
    win = _windows(_pad(x, pad), k, stride, g.shape[2:])
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


class Conv2d(Function):
    name = "conv2d"

    def __init__(self, stride, pad):
        self.stride, self.pad = _pair(stride), _pair(pad)

    def forward(self, x, w, b=None):
        self.x, self.w, self.has_bias = x, w, b is not None
        out = _conv_forward(x, w, self.stride, self.pad)
        if b is not None:
            out += b.reshape(1, -1, 1, 1)
        return out

    def backward(self, g):
        dx = _conv_input_grad(g, self.w, self.x.shape, self.stride, self.pad)
        dw = _conv_weight_grad(g, self.x, self.w.shape[2:], self.stride, self.pad)
        if self.has_bias:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Union[int, tuple[int, int]] = 1,
    pad: Union[int, tuple[int, int]] = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is ``[C_out, C_in, kh, kw]``; the output spatial size is
    ``floor((H + 2*pad - k) / stride) + 1``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4-D weight, got {x.dims} and {weight.dims}")
    if x.dims[1] != weight.dims[1]:
        raise ShapeError(f"conv2d: input has {x.dims[1]} channels, weight expects {weight.dims[1]}")
    sh, sw = _pair(pad)
    if x.dims[2] + 2 * sh < weight.dims[2] or x.dims[3] + 2 * sw < weight.dims[3]:
        raise ShapeError(f"conv2d: kernel {weight.dims[2:]} larger than padded input {x.dims[2:]}")
    if bias is not None and bias.dims != (weight.dims[0],):
        raise ShapeError(f"conv2d: bias dims {bias.dims} do not match {weight.dims[0]} outputs")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*inputs, stride=stride, pad=pad)


class ConvTranspose2d(Function):
    name = "conv_transpose2d"

    def __init__(self, stride, pad, out_hw):
        self.stride, self.pad, self.out_hw = _pair(stride), _pair(pad), out_hw

    def forward(self, y, w, b=None):
        self.y, self.w, self.has_bias = y, w, b is not None
        shape = (y.shape[0], w.shape[1], *self.out_hw)
        out = np.ascontiguousarray(_conv_input_grad(y, w, shape, self.stride, self.pad))
        if b is not None:
            out += b.reshape(1, -1, 1, 1)
        return out

    def backward(self, g):
        dy = _conv_forward(g, self.w, self.stride, self.pad)
        dw = _conv_weight_grad(self.y, g, self.w.shape[2:], self.stride, self.pad)
        if self.has_bias:
            return dy, dw, g.sum(axis=(0, 2, 3))
        return dy, dw


def conv_transpose_output_size(size: int, k: int, stride: int, pad: int, output_pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k + output_pad


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Union[int, tuple[int, int]] = 1,
    pad: Union[int, tuple[int, int]] = 0,
    output_pad: Union[int, tuple[int, int]] = 0,
) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``weight`` is ``[C_in, C_out, kh, kw]``: the same array used as a
    ``C_out -> C_in`` convolution maps the output back onto ``x``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D tensors, got {x.dims} and {weight.dims}")
    if x.dims[1] != weight.dims[0]:
        raise ShapeError(f"conv_transpose2d: input has {x.dims[1]} channels, weight expects {weight.dims[0]}")
    s, p, op = _pair(stride), _pair(pad), _pair(output_pad)
    for axis in range(2):
        if not 0 <= op[axis] < s[axis]:
            raise ShapeError(f"output_pad {op[axis]} must lie in [0, stride={s[axis]})")
    out_hw = tuple(
        conv_transpose_output_size(x.dims[2 + a], weight.dims[2 + a], s[a], p[a], op[a]) for a in range(2)
    )
    if min(out_hw) < 1:
        raise ShapeError(f"conv_transpose2d output dims {out_hw} are empty")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return ConvTranspose2d.apply(*inputs, stride=s, pad=p, out_hw=out_hw)


class MaxPool2d(Function):
    name = "maxpool2d"

    def __init__(self, k, stride, pad):
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x):
        k, s, p = self.k, self.stride, self.pad
        self.shape = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
        ho = conv_output_size(x.shape[2], k, s, p)
        wo = conv_output_size(x.shape[3], k, s, p)
        win = _windows(xp, (k, k), (s, s), (ho, wo))
        flat = win.reshape(*win.shape[:4], k * k)
        self.arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        k, s, p = self.k, self.stride, self.pad
        n, c, h, w = self.shape
        ho, wo = g.shape[2:]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = self.arg == i * k + j
                dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += np.where(hit, g, 0)
        return (dxp[:, :, p : p + h, p : p + w],)


def maxpool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    return MaxPool2d.apply(x, k=k, stride=stride, pad=pad)


# --------------------------------------------------------------------------
# normalization, resize, dense layers, loss


class BatchNorm2d(Function):
    name = "batchnorm2d"

    def __init__(self, running_mean, running_var, training, eps, momentum):
        self.running_mean, self.running_var = running_mean, running_var
        self.training, self.eps, self.momentum = training, eps, momentum

    def forward(self, x, gamma, beta):
        axes = (0, 2, 3)
        if self.training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * mu
            self.running_var *= 1 - m
            self.running_var += m * var * (count / (count - 1))
        else:
            mu, var = self.running_mean, self.running_var
        self.inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        self.xhat = (x - mu.reshape(1, -1, 1, 1)) * self.inv_std.reshape(1, -1, 1, 1)
        self.gamma = gamma
        return gamma.reshape(1, -1, 1, 1) * self.xhat + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3)
        dgamma = (g * self.xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * self.gamma.reshape(1, -1, 1, 1)
        inv_std = self.inv_std.reshape(1, -1, 1, 1)
        if not self.training:
            return dxhat * inv_std, dgamma, dbeta
        count = g.shape[0] * g.shape[2] * g.shape[3]
        dx = (
            inv_std
            / count
            * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True)
            )
        )
        return dx, dgamma, dbeta


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    arrays are updated in place (variance with Bessel's correction); in eval
    mode the running statistics are used and left untouched.
    """
    if x.data.ndim != 4 or gamma.dims != (x.dims[1],) or beta.dims != (x.dims[1],):
        raise ShapeError(f"batchnorm2d: input {x.dims} with gamma {gamma.dims}, beta {beta.dims}")
    if training and x.dims[0] * x.dims[2] * x.dims[3] < 2:
        raise ValueError("batchnorm2d in training mode needs at least 2 values per channel")
    return BatchNorm2d.apply(
        x, gamma, beta, running_mean=running_mean, running_var=running_var, training=training, eps=eps, momentum=momentum
    )


def interpolation_matrix(size_in: int, size_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic 1-D bilinear weights, half-pixel centres, clamped edges."""
    d = np.arange(size_out, dtype=np.float64)
    src = np.clip((d + 0.5) * (size_in / size_out) - 0.5, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = src - lo
    mat = np.zeros((size_out, size_in), dtype=np.float64)
    rows = np.arange(size_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


class BilinearResize(Function):
    name = "bilinear_resize"

    def __init__(self, size):
        self.size = size

    def forward(self, x):
        self.ry = interpolation_matrix(x.shape[2], self.size[0], x.dtype)
        self.rx = interpolation_matrix(x.shape[3], self.size[1], x.dtype)
        return np.matmul(np.matmul(self.ry, x), self.rx.T)

    def backward(self, g):
        return (np.matmul(np.matmul(self.ry.T, g), self.rx),)


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"resize target {target_h}x{target_w} must be positive")
    return BilinearResize.apply(x, size=(int(target_h), int(target_w)))


class Linear(Function):
    name = "linear"

    def forward(self, x, w, b=None):
        self.x, self.w, self.has_bias = x, w, b is not None
        out = x @ w.T
        if b is not None:
            out += b
        return out

    def backward(self, g):
        dx, dw = g @ self.w, g.T @ self.x
        return (dx, dw, g.sum(axis=0)) if self.has_bias else (dx, dw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.dims[1] != weight.dims[1]:
        raise ShapeError(f"linear: input {x.dims} incompatible with weight {weight.dims}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Linear.apply(*inputs)


class SoftmaxCrossEntropy(Function):
    name = "softmax_cross_entropy"

    def __init__(self, labels):
        self.labels = labels

    def forward(self, logits):
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(len(self.labels))
        self.prob = np.exp(z - lse[:, None])
        return np.asarray((lse - z[rows, self.labels]).mean(), dtype=logits.dtype)

    def backward(self, g):
        n = len(self.labels)
        d = self.prob.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (g / n),)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.dims[0],):
        raise ShapeError(f"logits {logits.dims} and labels {labels.shape} disagree")
    k = logits.dims[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)
