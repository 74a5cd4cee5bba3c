"""Dense tensors with a recorded graph for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import os
from typing import Any, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}

_DEBUG = os.environ.get("APN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand dimensions are incompatible with an operation."""


class Tensor:
    """Dense float array (rank 0-4, NCHW for images) with optional gradient.

    ``grad`` is a plain numpy array of the same shape, filled by
    :func:`backward`.  Gradients accumulate across backward calls until the
    caller resets them with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"

    # Operator sugar; the ops module is imported lazily to avoid a cycle.
    def __add__(self, other):
        from apn import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from apn import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from apn import ops

        return ops.sub(self, other)

    def __neg__(self):
        from apn import ops

        return ops.mul(self, -1.0)


class Node:
    """One recorded operation: the function object, its inputs and output."""

    __slots__ = ("fn", "inputs", "output")

    def __init__(self, fn: "Function", inputs: Sequence[Tensor], output: Tensor):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.output = output

    @property
    def op(self) -> str:
        return self.fn.name


class Tape:
    """Ordered record of the operations executed while it is active.

    Nodes are appended in execution order, which is a topological order of
    the graph, so a backward sweep simply walks the list in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tapes.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def __len__(self) -> int:
        return len(self.nodes)


class _State:
    def __init__(self) -> None:
        self.tapes: list[Tape] = []
        self.grad_enabled = True


_STATE = _State()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def grad_enabled() -> bool:
    return _STATE.grad_enabled


class Function:
    """Base class for a differentiable operation.

    ``forward`` receives raw arrays and stores whatever ``backward`` needs on
    ``self``; ``backward`` returns one gradient (or None) per tensor input.
    """

    name = "function"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(**kwargs)
        out_data = fn.forward(*(t.data for t in inputs))
        if _DEBUG and all(np.isfinite(t.data).all() for t in inputs):
            assert np.isfinite(out_data).all(), f"{cls.name} produced non-finite output"
        needs_grad = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs_grad)
        if needs_grad:
            node = Node(fn, inputs, out)
            out.node = node
            for tape in _STATE.tapes:
                tape.record(node)
        return out


def _topo_order(loss: Tensor) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss.node, False)] if loss.node else []
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp.node, False))
    return order


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    With a tape the sweep follows its recorded order; otherwise the graph is
    reached from ``loss`` directly.  Leaf gradients accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    nodes = tape.nodes if tape is not None else _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.node is None:
        _accumulate(loss, grads[id(loss)])
        return
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.fn.backward(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, ig)
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
