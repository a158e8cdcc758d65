"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations needed by the perceptual distances are implemented.
Each :class:`Var` records its parents together with a vector-Jacobian
product; :func:`grad` walks the graph in reverse topological order.

Non-differentiable points follow a "zero subgradient" convention: ``sqrt``
at 0 and ``atan2`` at the origin contribute no gradient.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np

# creation order doubles as a topological order: a node never precedes its parents
_sequence = itertools.count()


class Var:
    __slots__ = ("value", "parents", "seq")

    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.seq = next(_sequence)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _value(a):
    return a.value if isinstance(a, Var) else a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(value, pairs: Iterable[tuple]) -> "Var | np.ndarray":
    parents = tuple((p, f) for p, f in pairs if isinstance(p, Var))
    if not parents:
        return np.asarray(value, dtype=np.float64)
    return Var(value, parents)


def add(a, b):
    va, vb = _value(a), _value(b)
    out = va + vb
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g, np.shape(va))),
            (b, lambda g: _unbroadcast(g, np.shape(vb))),
        ],
    )


def neg(a):
    return _make(-_value(a), [(a, lambda g: -g)])


def mul(a, b):
    va, vb = _value(a), _value(b)
    return _make(
        va * vb,
        [
            (a, lambda g: _unbroadcast(g * vb, np.shape(va))),
            (b, lambda g: _unbroadcast(g * va, np.shape(vb))),
        ],
    )


def div(a, b):
    va, vb = _value(a), _value(b)
    out = va / vb
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g / vb, np.shape(va))),
            (b, lambda g: _unbroadcast(-g * out / vb, np.shape(vb))),
        ],
    )


def power(a, p: float):
    va = _value(a)
    if p == 2:
        return _make(va * va, [(a, lambda g: 2.0 * g * va)])
    return _make(va ** p, [(a, lambda g: g * p * va ** (p - 1))])


def sqrt(a):
    """Square root of a nonnegative input; gradient is 0 where the input is 0."""
    va = np.maximum(_value(a), 0.0)
    out = np.sqrt(va)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(out > 0, 0.5 * g / np.where(out > 0, out, 1.0), 0.0)
        return r

    return _make(out, [(a, vjp)])


def cbrt(a):
    """Cube root; callers must keep the input away from 0 for the gradient."""
    va = _value(a)
    out = np.cbrt(va)
    return _make(out, [(a, lambda g: g / (3.0 * out * out))])


def exp(a):
    out = np.exp(_value(a))
    return _make(out, [(a, lambda g: g * out)])


def sin(a):
    va = _value(a)
    return _make(np.sin(va), [(a, lambda g: g * np.cos(va))])


def cos(a):
    va = _value(a)
    return _make(np.cos(va), [(a, lambda g: -g * np.sin(va))])


def atan2(y, x):
    """Elementwise atan2(y, x); no gradient flows at the origin."""
    vy, vx = _value(y), _value(x)
    out = np.arctan2(vy, vx)
    r2 = vx * vx + vy * vy
    safe = np.where(r2 > 0, r2, 1.0)
    live = r2 > 0
    return _make(
        out,
        [
            (y, lambda g: _unbroadcast(np.where(live, g * vx / safe, 0.0), np.shape(vy))),
            (x, lambda g: _unbroadcast(np.where(live, -g * vy / safe, 0.0), np.shape(vx))),
        ],
    )


def where(mask: np.ndarray, a, b):
    """Select ``a`` where ``mask`` is true, else ``b``. ``mask`` is constant."""
    va, vb = _value(a), _value(b)
    return _make(
        np.where(mask, va, vb),
        [
            (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), np.shape(va))),
            (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), np.shape(vb))),
        ],
    )


def maximum(a, c: float):
    """max(a, c) for a constant ``c``; ties route the gradient to ``a``."""
    va = _value(a)
    mask = va >= c
    return _make(np.where(mask, va, c), [(a, lambda g: np.where(mask, g, 0.0))])


def total(a, axis=None):
    va = _value(a)
    shape = np.shape(va)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(np.sum(va, axis=axis), [(a, vjp)])


def mean(a, axis=None):
    va = _value(a)
    n = va.size if axis is None else np.prod([va.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(total(a, axis), 1.0 / n)


def getitem(a, idx):
    va = _value(a)

    def vjp(g):
        out = np.zeros_like(va)
        out[idx] += g
        return out

    return _make(va[idx], [(a, vjp)])


def linear_channels(a, matrix: np.ndarray):
    """Mix the leading (channel) axis with a constant matrix: out[i] = sum_j M[i,j] a[j]."""
    va = _value(a)
    return _make(
        np.tensordot(matrix, va, axes=(1, 0)),
        [(a, lambda g: np.tensordot(matrix.T, g, axes=(1, 0)))],
    )


def filter2d(a, left: np.ndarray, right: np.ndarray):
    """Separable linear filter on the last two axes: left @ a @ right.T."""
    va = _value(a)
    return _make(
        left @ va @ right.T,
        [(a, lambda g: left.T @ g @ right)],
    )


def grad(out: Var, wrt: Var) -> np.ndarray:
    """Gradient of scalar ``out`` with respect to ``wrt``."""
    if not isinstance(out, Var):
        return np.zeros_like(wrt.value)
    if out.value.size != 1:
        raise ValueError("grad() needs a scalar output")

    nodes: dict[int, Var] = {id(out): out}
    stack = [out]
    while stack:
        for parent, _ in stack.pop().parents:
            if id(parent) not in nodes:
                nodes[id(parent)] = parent
                stack.append(parent)
    order = sorted(nodes.values(), key=lambda n: n.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in order:
        g = grads.pop(id(node), None)
        if node is wrt:
            return g if g is not None else np.zeros_like(wrt.value)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return np.zeros_like(wrt.value)


def value_and_grad(fn: Callable[[Var], Var], x: np.ndarray) -> tuple[float, np.ndarray]:
    v = Var(np.array(x, dtype=np.float64))
    out = fn(v)
    return float(_value(out)), grad(out, v)
