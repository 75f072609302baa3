"""Reverse-mode automatic differentiation over numpy arrays.

Each :class:`Value` wraps a float64 array (a 0-d array for a scalar) and records
the local vector-Jacobian products needed to push gradients back to its
parents.  Graphs are built eagerly; :func:`backward` walks them once in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence["Array | None"]]


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording parents (results are constants)."""
    previous = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Value:
    """A node in the computation graph.

    ``grad`` is ``None`` until a backward pass reaches the node.  Repeated
    backward passes accumulate into ``grad``; call :func:`zero_grad` (or
    :meth:`zero_grad`) to reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None if not self.requires_grad else np.zeros_like(self.data)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Value":
        return transpose(self)

    def reshape(self, *shape) -> "Value":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Value":
        return vsum(self, axis=axis, keepdims=keepdims)


def param(data, name: str | None = None) -> Value:
    """Create a trainable leaf with a zero-initialised gradient."""
    v = Value(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
    v.grad = np.zeros_like(v.data)
    return v


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data: Array, parents: Sequence[Value], backward: BackwardFn) -> Value:
    out = Value(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------
def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Value:
    a = as_value(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Value:
    a = as_value(a)
    ad = a.data
    if exponent == 2:
        return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return _node(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Value:
    a = as_value(a)
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _node(out, (a,), lambda g: (g / ad,))


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def maximum(a, floor: float) -> Value:
    """Elementwise ``max(a, floor)`` against a constant; no gradient below the floor."""
    a = as_value(a)
    above = a.data > floor
    return _node(np.where(above, a.data, floor), (a,), lambda g: (g * above,))


def xlogx(a) -> Value:
    """``x log x`` with ``0 log 0 = 0``; inputs are clipped to [0, 1] first.

    The clip keeps ``-sum(xlogx(p))`` non-negative when ``p`` is a probability
    vector carrying rounding error just above one.
    """
    a = as_value(a)
    x = np.clip(a.data, 0.0, 1.0)
    pos = x > 0.0
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, safe * np.log(safe), 0.0)
    dout = np.where(pos, np.log(safe) + 1.0, 0.0)
    return _node(out, (a,), lambda g: (g * dout,))


# -- reductions and linear algebra --------------------------------------
def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(out), (a,), backward)


def mean(a, axis=None) -> Value:
    a = as_value(a)
    n = a.size if axis is None else a.shape[axis]
    return vsum(a, axis=axis) / float(n)


def logsumexp(a, axis=None, keepdims: bool = False) -> Value:
    """Stable ``log(sum(exp(a)))``.  Slices that are entirely ``-inf`` give ``-inf``
    and pass back zero gradient."""
    a = as_value(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    out = s if keepdims else (np.squeeze(s, axis=axis) if axis is not None else s.reshape(()))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis) if axis is not None else np.reshape(g, s.shape)
        finite = np.isfinite(s)
        w = np.exp(x - np.where(finite, s, 0.0))
        w = np.where(finite, w, 0.0)
        return (g * w,)

    return _node(np.asarray(out), (a,), backward)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = np.outer(g, bd) if ad.ndim == 2 else g * bd
            gb = ad.T @ g if ad.ndim == 2 else g * ad
        else:
            ga = g @ bd.T if ad.ndim == 2 else bd @ g
            gb = ad.T @ g if ad.ndim == 2 else np.outer(ad, g)
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


# -- shape manipulation -------------------------------------------------
def reshape(a, shape) -> Value:
    a = as_value(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Value:
    a = as_value(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def take(a, index) -> Value:
    """Basic or advanced indexing; repeated indices accumulate in the backward pass."""
    a = as_value(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.asarray(a.data[index]), (a,), backward)


def concat(values: Iterable, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.data for v in values], axis=axis)
    return _node(out, values, lambda g: np.split(g, splits, axis=axis))


def stack(values: Iterable, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(values))]

    return _node(out, values, backward)


# -- graph traversal ----------------------------------------------------
def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Value, seed: Array | float | None = None) -> None:
    """Accumulate ``d root / d node`` into ``node.grad`` for every ancestor.

    ``root`` is normally a scalar; pass ``seed`` for a non-scalar root.
    """
    if not root.requires_grad:
        return
    g0 = np.ones_like(root.data) if seed is None else np.broadcast_to(
        np.asarray(seed, dtype=np.float64), root.shape).copy()
    pending: dict[int, Array] = {id(root): g0}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = np.array(g) if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg)


def zero_grad(values: Iterable[Value]) -> None:
    for v in values:
        v.zero_grad()
