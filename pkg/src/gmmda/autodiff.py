"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a :class:`Node` holding its value and, for each parent, the
vector-Jacobian product used during :func:`backward`.  Broadcasting follows
numpy rules; gradients are summed back to the parent's shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node", "GrlConfig", "CheckReport", "ShapeError", "DomainError",
    "as_node", "constant", "matmul", "add", "sub", "mul", "div", "scalar_mul",
    "neg", "sigmoid", "relu", "exp", "log", "sqrt", "square", "power",
    "sum", "mean", "softmax_rows", "concat_rows", "slice_rows", "getitem",
    "reshape", "transpose", "maximum", "clip", "grl", "backward",
    "zero_grad", "finite_difference_check", "op_forward",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, parents=(), name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def detach(self) -> "Node":
        return Node(self.value.copy())

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Node":
        return transpose(self)


@dataclass(frozen=True)
class GrlConfig:
    coefficient: float = 1.0

    def __post_init__(self):
        if not self.coefficient >= 0:
            raise ValueError(f"GRL coefficient must be >= 0, got {self.coefficient}")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(kind: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _make(value, *parents) -> Node:
    """Build a node from (parent, vjp) pairs, dropping parents that need no gradient."""
    kept = tuple((p, f) for p, f in parents if p.requires_grad)
    return Node(value, parents=kept)


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_check("add", a, b)
    return _make(a.value + b.value,
                 (a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_check("sub", a, b)
    return _make(a.value - b.value,
                 (a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_check("elementwise-mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, a.shape)),
                 (b, lambda g: _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_check("div", a, b)
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out,
                 (a, lambda g: _unbroadcast(g / bv, a.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, b.shape)))


def scalar_mul(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a, lambda g: g * c))


def neg(a) -> Node:
    return scalar_mul(a, -1.0)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))


def maximum(a, b) -> Node:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_node(a), as_node(b)
    _broadcast_check("maximum", a, b)
    pick_a = a.value >= b.value
    return _make(np.where(pick_a, a.value, b.value),
                 (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
                 (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


# ----------------------------------------------------------------- unary ops

def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a, lambda g: g * out))


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError(f"log: nonpositive input (min {a.value.min():.3g})")
    x = a.value
    return _make(np.log(x), (a, lambda g: g / x))


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError(f"sqrt: nonpositive input (min {a.value.min():.3g})")
    out = np.sqrt(a.value)
    return _make(out, (a, lambda g: g * 0.5 / out))


def square(a) -> Node:
    a = as_node(a)
    x = a.value
    return _make(x * x, (a, lambda g: 2.0 * g * x))


def power(a, p: float) -> Node:
    """``a ** p`` for a constant exponent; ``a`` must be positive unless ``p`` is a nonnegative integer."""
    a = as_node(a)
    p = float(p)
    x = a.value
    if not (p >= 0 and p.is_integer()) and np.any(x <= 0):
        raise DomainError("power: nonpositive base with non-integer exponent")
    if p == 0:
        return _make(np.ones_like(x), (a, lambda g: np.zeros_like(x)))
    return _make(x ** p, (a, lambda g: g * p * x ** (p - 1.0)))


def clip(a, lo: float | None = None, hi: float | None = None) -> Node:
    """Clamp into [lo, hi]; gradient is zero where the clamp is active."""
    a = as_node(a)
    x = a.value
    out = np.clip(x, lo, hi)
    inside = out == x
    return _make(out, (a, lambda g: g * inside))


def grl(a, coefficient: float | GrlConfig = 1.0) -> Node:
    """Gradient reversal: identity forward, ``-coefficient * upstream`` backward."""
    cfg = coefficient if isinstance(coefficient, GrlConfig) else GrlConfig(float(coefficient))
    a = as_node(a)
    c = cfg.coefficient
    return _make(a.value.copy(), (a, lambda g: -c * g))


# ---------------------------------------------------------- reductions/shape

def sum(a, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(out, (a, vjp))


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.size if axis is None else a.shape[axis]
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"row-softmax: expected a matrix, got shape {a.shape}")
    x = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=1, keepdims=True))

    return _make(out, (a, vjp))


def concat_rows(nodes: Sequence) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat-rows: no inputs")
    tail = nodes[0].shape[1:]
    for n in nodes[1:]:
        if n.shape[1:] != tail:
            raise ShapeError(f"concat-rows: incompatible shapes {nodes[0].shape} and {n.shape}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])
    out = np.concatenate([n.value for n in nodes], axis=0)
    parents = [(n, (lambda lo, hi: lambda g: g[lo:hi])(bounds[i], bounds[i + 1]))
               for i, n in enumerate(nodes)]
    return _make(out, *parents)


def getitem(a, idx) -> Node:
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _make(a.value[idx], (a, vjp))


def slice_rows(a, start: int, stop: int) -> Node:
    a = as_node(a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice-rows: bad range [{start}, {stop}) for shape {a.shape}")
    return getitem(a, slice(start, stop))


def reshape(a, shape: tuple) -> Node:
    a = as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _make(out, (a, lambda g: g.reshape(old)))


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.value.T, (a, lambda g: g.T))


_KINDS: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "elementwise-mul": mul,
    "scalar-mul": scalar_mul, "sigmoid": sigmoid, "relu": relu, "exp": exp,
    "log": log, "sqrt": sqrt, "square": square, "sum": sum, "mean": mean,
    "row-softmax": softmax_rows, "concat-rows": lambda *xs: concat_rows(xs),
    "slice-rows": slice_rows, "grl": grl,
}


def op_forward(kind: str, inputs: Sequence, *args) -> Node:
    """Dispatch by operation-kind name, e.g. ``op_forward("sigmoid", [x])``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, *args)


# ------------------------------------------------------------------ backward

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node needing it."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + contrib
            else:
                upstream[key] = contrib


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------ finite differences

@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def finite_difference_check(f: Callable[[Node], Node], x, h: float = 1e-5,
                            tol: float = 1e-4) -> CheckReport:
    """Compare backward() gradients of scalar ``f`` at ``x`` with central differences.

    ``f`` receives a leaf Node shaped like ``x`` and must return a scalar Node.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = Node(x.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.value)):
        raise DomainError("f is not finite at x")
    backward(out)
    analytic = np.zeros_like(x) if leaf.grad is None else leaf.grad.copy()

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Node(xp.reshape(x.shape))).value
        fm = f(Node(xm.reshape(x.shape))).value
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise DomainError(f"f is not finite near coordinate {i}")
        flat[i] = (float(fp.reshape(-1)[0]) - float(fm.reshape(-1)[0])) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
    if math.isnan(err):
        raise DomainError("non-finite gradient")
    return CheckReport(err, err <= tol, analytic, numeric)
