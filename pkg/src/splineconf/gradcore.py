"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every :class:`Node` wraps a float64 array together with the closure that
pushes its adjoint back to its parents.  The engine is deliberately small:
it covers the operations needed by a two-layer GeLU encoder, linear heads,
the sorted-knot parameterization and the spline log-likelihood.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "GradError",
    "NumericalError",
    "Node",
    "ParamStore",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "max0",
    "exp",
    "log",
    "tanh",
    "gelu",
    "softplus",
    "softmax",
    "log_softmax",
    "cumulative_sum",
    "matvec",
    "maximum_const",
    "sum_",
    "mean",
    "take",
    "reshape",
    "concat",
    "backward",
    "gradient_check",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class GradError(ValueError):
    """Structural misuse of the engine (shape mismatch, non-scalar root)."""


class NumericalError(ArithmeticError):
    """A primitive produced a non-finite value."""


class Node:
    """One value on the tape.

    ``parents`` holds the input nodes and ``_backward`` maps this node's
    adjoint to contributions for each parent.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward", "requires_grad", "name")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, op: str = "leaf", parents: tuple = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    # operator sugar
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
        return matvec(self, other)

    def __getitem__(self, index):
        return _slice(self, index)


def constant(value) -> Node:
    return Node(value, op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite output from '{op}'")
    return value


def _broadcast_shape(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise GradError(f"shape mismatch in '{op}': {shapes}") from exc


def _binary(op, a, b, value, ga, gb) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(op, a.shape, b.shape)

    def back(g):
        return (_unbroadcast(ga(g), a.shape), _unbroadcast(gb(g), b.shape))

    return Node(_check(value(a.value, b.value), op), op, (a, b), back)


def add(a, b) -> Node:
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _binary("mul", a, b, np.multiply, lambda g: g * b.value, lambda g: g * a.value)


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _binary(
        "div", a, b, np.divide,
        lambda g: g / b.value,
        lambda g: -g * a.value / (b.value * b.value),
    )


def _unary(op: str, x, value: np.ndarray, local: Callable[[np.ndarray], np.ndarray]) -> Node:
    x = _as_node(x)
    out = Node(_check(value, op), op, (x,), None)
    out._backward = lambda g: (local(g),)
    return out


def neg(x) -> Node:
    x = _as_node(x)
    return _unary("neg", x, -x.value, lambda g: -g)


def max0(x) -> Node:
    """Zero truncation.  Subgradient at exactly zero is taken as 0."""
    x = _as_node(x)
    mask = x.value > 0
    return _unary("max0", x, np.where(mask, x.value, 0.0), lambda g: g * mask)


def maximum_const(x, floor: float) -> Node:
    x = _as_node(x)
    mask = x.value > floor
    return _unary("maximum", x, np.where(mask, x.value, floor), lambda g: g * mask)


def exp(x) -> Node:
    x = _as_node(x)
    with np.errstate(over="ignore"):
        v = np.exp(x.value)
    return _unary("exp", x, v, lambda g: g * v)


def log(x) -> Node:
    x = _as_node(x)
    if np.any(x.value <= 0):
        raise NumericalError("non-finite output from 'log' (input <= 0)")
    return _unary("log", x, np.log(x.value), lambda g: g / x.value)


def tanh(x) -> Node:
    x = _as_node(x)
    v = np.tanh(x.value)
    return _unary("tanh", x, v, lambda g: g * (1.0 - v * v))


def gelu(x) -> Node:
    """Exact GeLU, x * Phi(x)."""
    x = _as_node(x)
    cdf = 0.5 * (1.0 + erf(x.value / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.value * x.value)
    return _unary("gelu", x, x.value * cdf, lambda g: g * (cdf + x.value * pdf))


def softplus(x) -> Node:
    x = _as_node(x)
    v = np.logaddexp(0.0, x.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _unary("softplus", x, v, lambda g: g * sig)


def softmax(x, axis: int = -1) -> Node:
    x = _as_node(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def local(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _unary("softmax", x, s, local)


def log_softmax(x, axis: int = -1) -> Node:
    x = _as_node(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    v = shifted - lse
    s = np.exp(v)
    return _unary("log_softmax", x, v, lambda g: g - s * g.sum(axis=axis, keepdims=True))


def cumulative_sum(x, axis: int = -1) -> Node:
    x = _as_node(x)

    def local(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _unary("cumulative_sum", x, np.cumsum(x.value, axis=axis), local)


def matvec(a, b) -> Node:
    """Matrix product ``a @ b`` for 1-D or 2-D operands."""
    a, b = _as_node(a), _as_node(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise GradError(f"shape mismatch in 'matvec': {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return Node(_check(av @ bv, "matvec"), "matvec", (a, b), back)


def sum_(x, axis=None) -> Node:
    x = _as_node(x)
    shape = x.shape

    def local(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _unary("sum", x, x.value.sum(axis=axis), local)


def mean(x, axis=None) -> Node:
    x = _as_node(x)
    count = x.value.size if axis is None else x.value.shape[axis]
    return div(sum_(x, axis), float(count))


def _slice(x: Node, index) -> Node:
    shape = x.shape

    def local(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _unary("slice", x, x.value[index], local)


def reshape(x, shape) -> Node:
    x = _as_node(x)
    old = x.shape
    return _unary("reshape", x, x.value.reshape(shape), lambda g: g.reshape(old))


def take(x, indices: np.ndarray, axis: int = -1) -> Node:
    """``np.take_along_axis`` with a scatter-add backward."""
    x = _as_node(x)
    indices = np.asarray(indices)
    shape = x.shape

    def local(g):
        out = np.zeros(shape)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return out

    return _unary("take", x, np.take_along_axis(x.value, indices, axis=axis), local)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise GradError(f"shape mismatch in 'concat': {[n.shape for n in nodes]}") from exc
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Node(value, "concat", nodes, back)


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, params: Iterable[Node] = ()) -> dict[int, np.ndarray]:
    """Propagate adjoints from a scalar ``root`` seeded with 1.

    Returns a map ``id(param) -> gradient``; parameters the root does not
    depend on get zeros.
    """
    if root.value.size != 1:
        raise GradError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    out = {}
    for p in params:
        out[id(p)] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


class ParamStore:
    """Named trainable arrays with AdamW moment buffers."""

    def __init__(self):
        self.params: dict[str, Node] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Node:
        node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = node
        self.m[name] = np.zeros_like(node.value)
        self.v[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].value = np.array(v, dtype=np.float64)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.params.values():
            n = p.value.size
            p.value = np.asarray(vec[i:i + n], dtype=np.float64).reshape(p.value.shape).copy()
            i += n

    @contextmanager
    def bound(self, flat: Node):
        """Temporarily replace every parameter by a slice of ``flat``."""
        saved = dict(self.params)
        i = 0
        for k, p in saved.items():
            n = p.value.size
            self.params[k] = reshape(flat[i:i + n], p.value.shape)
            i += n
        try:
            yield self
        finally:
            self.params = saved

    def grads(self, root: Node) -> dict[str, np.ndarray]:
        g = backward(root, self.params.values())
        return {k: g[id(p)] for k, p in self.params.items()}


def gradient_check(fn: Callable[[Node], Node], point, step: float = 1e-5,
                   batch_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Compare the tape gradient of ``fn`` with central differences.

    ``fn`` maps a parameter-vector node to a scalar node.  ``batch_fn``, if
    given, evaluates the same function on a stack of points (M, P) and is
    used for the numeric side.  Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    point = np.array(point, dtype=np.float64).ravel()
    leaf = Node(point.copy(), requires_grad=True, name="point")
    root = fn(leaf)
    analytic = backward(root, [leaf])[id(leaf)]

    n = point.size
    values = np.empty(2 * n)
    for lo in range(0, n, 256):
        hi = min(n, lo + 256)
        offsets = np.zeros((hi - lo, n))
        offsets[np.arange(hi - lo), np.arange(lo, hi)] = step
        stack = np.concatenate([point + offsets, point - offsets])
        if batch_fn is not None:
            vals = np.asarray(batch_fn(stack), dtype=np.float64)
        else:
            vals = np.array([float(fn(constant(p)).value) for p in stack])
        values[lo:hi], values[n + lo:n + hi] = vals[: hi - lo], vals[hi - lo:]
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite function value in gradient_check")
    numeric = (values[:n] - values[n:]) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
