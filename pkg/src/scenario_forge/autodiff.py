"""Reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active record their inputs and
vector-Jacobian products; :meth:`Tape.backward` replays them in reverse
creation order. Outside a tape every operation is a plain numpy computation,
so the same model code serves training (with gradients) and inference.

Conventions:
    * double precision everywhere;
    * ``relu`` has sub-gradient 0 at 0;
    * ``minimum``/``maximum`` attribute ties to the first argument;
    * ``sqrt`` has gradient 0 at exactly 0.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "Node",
    "Tape",
    "as_node",
    "constant",
    "custom",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "minimum",
    "maximum",
    "where",
    "sum",
    "mean",
    "matmul",
    "matvec",
    "concat",
    "stack",
    "slice",
    "take",
    "segment_sum",
    "reshape",
    "transpose",
    "wrap_angle",
    "finite_diff_check",
    "FDCheckResult",
]


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(AutodiffError, ValueError):
    """Operand outside the mathematical domain of the operation."""


class ContractError(AutodiffError, ValueError):
    """A call violated the documented precondition."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    """A value in a computation, optionally recorded on a tape."""

    __slots__ = ("value", "parents", "vjps", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjps=(), requires_grad=False):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    @property
    def size(self) -> int:
        return int(np.size(self.value))

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        return float(np.asarray(self.value).reshape(-1)[0]) if self.size == 1 else _not_scalar()

    def __repr__(self) -> str:
        tag = "var" if self.requires_grad and not self.parents else ("op" if self.parents else "const")
        return f"Node<{tag}>({np.asarray(self.value)!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice(self, index)


def _not_scalar():
    raise ContractError("item() requires a single-element node")


class Tape:
    """Records one forward evaluation for reverse-mode differentiation.

    Use as a context manager; nodes created inside are appended in creation
    order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - defensive
            stack.remove(self)

    def variable(self, value) -> Node:
        node = Node(np.array(value, dtype=np.float64), requires_grad=True)
        self.nodes.append(node)
        self.leaves.append(node)
        return node

    def backward(self, output: Node) -> dict[Node, np.ndarray]:
        """Gradient of the scalar ``output`` with respect to every leaf."""
        if not isinstance(output, Node) or output.size != 1:
            raise ContractError("backward() requires a scalar output node")
        grads: dict[int, np.ndarray] = {}
        result = {leaf: np.zeros(np.shape(leaf.value)) for leaf in self.leaves}
        if not output.requires_grad:
            return result
        grads[id(output)] = np.ones(np.shape(output.value))
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if node in result:
                    result[node] = result[node] + g
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                gp = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        return result


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64))


constant = as_node


def custom(value, parents: Sequence[Node], vjps: Sequence[Callable]) -> Node:
    """Create a node for a user-defined operation.

    ``vjps[i]`` maps the output cotangent to the cotangent of ``parents[i]``.
    """
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Node(value)
    node = Node(value, tuple(parents), tuple(vjps), True)
    tape.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, fn):
    a, b = as_node(a), as_node(b)
    try:
        value = fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    return a, b, value


def add(a, b) -> Node:
    a, b, value = _binary(a, b, np.add)
    sa, sb = a.shape, b.shape
    return custom(value, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b, value = _binary(a, b, np.subtract)
    sa, sb = a.shape, b.shape
    return custom(value, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b, value = _binary(a, b, np.multiply)
    av, bv = a.value, b.value
    return custom(
        value,
        (a, b),
        (lambda g: _unbroadcast(g * bv, np.shape(av)), lambda g: _unbroadcast(g * av, np.shape(bv))),
    )


def div(a, b) -> Node:
    a, b, value = _binary(a, b, np.divide)
    av, bv = a.value, b.value
    return custom(
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g / bv, np.shape(av)),
            lambda g: _unbroadcast(-g * av / (bv * bv), np.shape(bv)),
        ),
    )


def neg(a) -> Node:
    a = as_node(a)
    return custom(-a.value, (a,), (lambda g: -g,))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return custom(av * av, (a,), (lambda g: 2.0 * g * av,))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return custom(t, (a,), (lambda g: g * (1.0 - t * t),))


def sigmoid(a) -> Node:
    a = as_node(a)
    s = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return custom(s, (a,), (lambda g: g * s * (1.0 - s),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return custom(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)
    return custom(e, (a,), (lambda g: g * e,))


def log(a) -> Node:
    a = as_node(a)
    if np.any(np.asarray(a.value) <= 0):
        raise DomainError("log requires strictly positive input")
    av = a.value
    return custom(np.log(av), (a,), (lambda g: g / av,))


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(np.asarray(a.value) < 0):
        raise DomainError("sqrt requires non-negative input")
    r = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(r > 0, 0.5 * g / np.where(r > 0, r, 1.0), 0.0)
        return out

    return custom(r, (a,), (vjp,))


def sin(a) -> Node:
    a = as_node(a)
    c = np.cos(a.value)
    return custom(np.sin(a.value), (a,), (lambda g: g * c,))


def cos(a) -> Node:
    a = as_node(a)
    s = np.sin(a.value)
    return custom(np.cos(a.value), (a,), (lambda g: -g * s,))


def minimum(a, b) -> Node:
    a, b, value = _binary(a, b, np.minimum)
    first = np.asarray(a.value <= b.value)
    sa, sb = a.shape, b.shape
    return custom(
        value,
        (a, b),
        (lambda g: _unbroadcast(g * first, sa), lambda g: _unbroadcast(g * ~first, sb)),
    )


def maximum(a, b) -> Node:
    a, b, value = _binary(a, b, np.maximum)
    first = np.asarray(a.value >= b.value)
    sa, sb = a.shape, b.shape
    return custom(
        value,
        (a, b),
        (lambda g: _unbroadcast(g * first, sa), lambda g: _unbroadcast(g * ~first, sb)),
    )


def where(cond, a, b) -> Node:
    """Select elementwise; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_node(a), as_node(b)
    try:
        value = np.where(cond, a.value, b.value)
    except ValueError as exc:
        raise ShapeError("incompatible shapes in where") from exc
    sa, sb = a.shape, b.shape
    return custom(
        value,
        (a, b),
        (lambda g: _unbroadcast(g * cond, sa), lambda g: _unbroadcast(g * ~cond, sb)),
    )


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape
    value = np.sum(a.value, axis=axis, keepdims=keepdims)
    return custom(value, (a,), (lambda g: _expand_reduced(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    shape = a.shape
    value = np.mean(a.value, axis=axis, keepdims=keepdims)
    count = np.size(a.value) / max(np.size(value), 1)
    return custom(value, (a,), (lambda g: _expand_reduced(g, shape, axis, keepdims) / count,))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return custom(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def matvec(m, v) -> Node:
    m, v = as_node(m), as_node(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec expects (n,k) and (k,), got {m.shape} and {v.shape}")
    mv, vv = m.value, v.value
    return custom(mv @ vv, (m, v), (lambda g: np.outer(g, vv), lambda g: mv.T @ g))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError("incompatible shapes in concat") from exc
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def make(i):
        lo, hi = bounds[i], bounds[i + 1]
        return lambda g: np.take(g, np.arange(lo, hi), axis=axis)

    return custom(value, tuple(nodes), tuple(make(i) for i in range(len(nodes))))


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        value = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError("incompatible shapes in stack") from exc

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return custom(value, tuple(nodes), tuple(make(i) for i in range(len(nodes))))


def slice(a, index) -> Node:  # noqa: A001 - primitive name
    a = as_node(a)
    shape = a.shape
    value = np.asarray(a.value)[index]

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return custom(value, (a,), (vjp,))


def take(a, indices, axis: int = 0) -> Node:
    """Gather along ``axis`` (repeated indices accumulate in the gradient)."""
    a = as_node(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    value = np.take(a.value, indices, axis=axis)

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return out

    return custom(value, (a,), (vjp,))


def segment_sum(a, segment_ids, num_segments: int) -> Node:
    """Sum rows of ``a`` into ``num_segments`` buckets."""
    a = as_node(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape[0] != a.shape[0]:
        raise ShapeError("segment_ids must have one entry per row")
    value = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(value, ids, a.value)
    return custom(value, (a,), (lambda g: g[ids],))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return custom(np.reshape(a.value, shape), (a,), (lambda g: np.reshape(g, old),))


def transpose(a) -> Node:
    a = as_node(a)
    return custom(np.transpose(a.value), (a,), (lambda g: np.transpose(g),))


def wrap_angle(a) -> Node:
    """Wrap to (-pi, pi]; locally the identity, so the gradient passes through."""
    a = as_node(a)
    v = np.asarray(a.value)
    wrapped = np.remainder(v + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    return custom(wrapped, (a,), (lambda g: g,))


@dataclass
class FDCheckResult:
    max_rel_error: float
    ad_grad: np.ndarray
    fd_grad: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def n_compared(self) -> int:
        return self.ad_grad.size - self.excluded.size


def finite_diff_check(
    f: Callable[[Node], Node],
    point,
    h: float = 1e-6,
    kink_tol: float = 1e-3,
) -> FDCheckResult:
    """Compare ``backward`` against central differences of ``f`` at ``point``.

    Coordinates where the forward and backward one-sided differences disagree
    by more than ``kink_tol`` (relative) straddle a kink; they are reported in
    ``excluded`` and left out of the error. The error is the largest absolute
    deviation divided by the infinity norm of the compared gradients.
    """
    point = np.array(point, dtype=np.float64)
    with Tape() as tape:
        x = tape.variable(point)
        out = f(x)
    ad = tape.backward(out)[x]

    def evaluate(p):
        return float(np.asarray(f(as_node(p)).value).reshape(-1)[0])

    f0 = evaluate(point)
    flat = point.reshape(-1)
    fd = np.zeros_like(flat)
    excluded = []
    ad_flat = ad.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        fp = evaluate((flat + step).reshape(point.shape))
        fm = evaluate((flat - step).reshape(point.shape))
        fd[i] = (fp - fm) / (2.0 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fd[i]), abs(ad_flat[i])):
            excluded.append(i)
    mask = np.ones(flat.size, dtype=bool)
    mask[excluded] = False
    if mask.any():
        scale = max(np.max(np.abs(fd[mask])), np.max(np.abs(ad_flat[mask])), 1e-300)
        err = float(np.max(np.abs(fd[mask] - ad_flat[mask])) / scale)
    else:
        err = 0.0
    return FDCheckResult(err, ad, fd.reshape(point.shape), np.asarray(excluded, dtype=np.intp))
