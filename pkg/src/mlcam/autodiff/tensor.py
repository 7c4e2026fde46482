"""Dense float64 tensor with tape-based reverse-mode differentiation."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from mlcam.errors import ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    Leaves created with ``requires_grad=True`` collect ``grad`` after
    :func:`backward`. Non-leaf tensors keep a reference to the operation that
    produced them (``_parents`` and ``_backward``) until the graph is dropped.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # construction helpers -------------------------------------------------
    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward_fn: BackwardFn,
        op: str,
    ) -> Tensor:
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # elementwise arithmetic ------------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return tsum(self) * (1.0 / self.size)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in _as_tuple(index))

    def _back(g: np.ndarray):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(a.data[index]), (a,), _back, "getitem")


def _as_tuple(index) -> tuple:
    return index if isinstance(index, tuple) else (index,)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.stack([x.data for x in xs], axis=axis)
    return Tensor._from_op(
        out,
        xs,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))),
        "stack",
    )


# graph -------------------------------------------------------------------
@dataclass(frozen=True)
class Record:
    output: Tensor
    op: str
    inputs: tuple[Tensor, ...]


class Graph:
    """Topologically ordered operation records reachable from one output.

    Every input of record ``k`` is either a leaf or the output of a record
    with index ``< k``.
    """

    def __init__(self, records: list[Record]):
        self.records = records

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Record] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(output, False)]
        # iterative post-order DFS; deep networks would overflow recursion
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(Record(node, node.op, node._parents))
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent._backward is not None and id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Gradients add onto existing ``grad`` buffers, so calling this for several
    losses sums their contributions.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if graph is None:
        graph = Graph.from_output(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(graph.records):
        out = record.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = out._backward(g)
        for parent, pg in zip(record.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if loss._backward is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return graph


def check_shape(t: Tensor, ndims: tuple[int, ...], name: str) -> None:
    if t.ndim not in ndims:
        raise DimensionError(
            f"{name} must have {' or '.join(map(str, ndims))} dimensions, got shape {t.shape}",
            axis="rank",
        )
