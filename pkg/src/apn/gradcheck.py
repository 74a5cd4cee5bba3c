"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from apn.tensor import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def numerical_grad(
    f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, indices: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            out[n] = _central(f, flat, i, h)
    return out


def _central(f, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    fp = float(f().data)
    flat[i] = orig - h
    fm = float(f().data)
    flat[i] = orig
    return (fp - fm) / (2 * h)


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    dtype=np.float64,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``f`` takes no arguments and reads ``x`` (and any other tensors) from its
    closure.  ``x.data`` must already be ``dtype``.  The denominator is
    ``max(|a|, |b|, 1e-12)``.  Pass ``indices`` to check a subset of the
    flattened coordinates.
    """
    if x.data.dtype != dtype:
        raise TypeError(f"grad_check expects {np.dtype(dtype).name} data, got {x.data.dtype}")
    x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    loss = f()
    backward(loss)
    analytic = np.zeros(x.data.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
    x.grad = None
    x.requires_grad = was
    if indices is not None:
        analytic = analytic[list(indices)]
    numeric = numerical_grad(f, x, h, indices)
    if analytic.size == 0:
        return 0.0
    return float(relative_error(analytic, numeric).max())
