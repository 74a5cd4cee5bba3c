"""SGD with Nesterov momentum and L2 weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from apn.nn import Parameter


def sgd_nesterov_step(
    params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0
) -> None:
    """One in-place update of every parameter that has a gradient.

    With ``d = g + weight_decay * p``::

        v <- momentum * v + d
        p <- p - lr * (d + momentum * v)

    Momentum buffers live on the parameters and persist across calls.
    """
    for p in params:
        if p.grad is None:
            continue
        dtype = p.data.dtype.type
        d = p.grad + dtype(weight_decay) * p.data if weight_decay else p.grad
        if p.momentum_buffer is None:
            p.momentum_buffer = np.zeros_like(p.data)
        p.momentum_buffer *= dtype(momentum)
        p.momentum_buffer += d
        p.data -= dtype(lr) * (d + dtype(momentum) * p.momentum_buffer)
