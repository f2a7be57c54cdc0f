"""Reverse-mode automatic differentiation on an append-only tape.

Every node stores its forward value and the local partial derivatives with
respect to its parents, so the adjoint sweep is a single reverse pass. Node
values may be scalars or numpy arrays; arithmetic broadcasts elementwise, which
lets the particles of a Monte-Carlo estimate share one graph (each array entry
is an independent scalar computation).

The module-level functions (:func:`exp`, :func:`log`, :func:`normal_cdf`, ...)
accept either :class:`Var` or plain numbers/arrays. Plain inputs are evaluated
with numpy and never touch a tape, so frozen parameters cost nothing to
differentiate.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .numerics import LOG_2PI, DomainError


class NonFiniteError(FloatingPointError):
    """A primitive produced a NaN or infinite value."""


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Append-only computation graph. Parents always precede children."""

    def __init__(self):
        self.values: list = []
        self.parents: list[tuple] = []
        self.partials: list[tuple] = []

    def __len__(self):
        return len(self.values)

    def reset(self):
        self.values.clear()
        self.parents.clear()
        self.partials.clear()

    def variable(self, value) -> "Var":
        """Register a new leaf."""
        return self._push(value, (), (), check=True)

    def _push(self, value, parents, partials, check=False) -> "Var":
        if check and not np.all(np.isfinite(value)):
            raise NonFiniteError("non-finite value on tape")
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        return Var(self, len(self.values) - 1, value)

    def adjoints(self, output: "Var") -> list:
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if np.size(output.value) != 1:
            raise ValueError("gradient requires a scalar output")
        n = output.index + 1
        adj = [None] * n
        adj[output.index] = np.ones_like(np.asarray(output.value, dtype=float))
        values = self.values
        for i in range(output.index, -1, -1):
            a = adj[i]
            if a is None:
                continue
            for p, d in zip(self.parents[i], self.partials[i]):
                c = _unbroadcast(d * a, np.shape(values[p]))
                adj[p] = c if adj[p] is None else adj[p] + c
        return adj


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var(index={self.index}, value={self.value!r})"

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else x


def _binary(a, b, value, da, db):
    tape = _tape_of(a, b)
    parents, partials = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        partials.append(da)
    if isinstance(b, Var):
        if isinstance(a, Var) and b.tape is not a.tape:
            raise ValueError("operands live on different tapes")
        parents.append(b.index)
        partials.append(db)
    return tape._push(value, tuple(parents), tuple(partials), check=True)


def _unary(x, value, dx):
    return x.tape._push(value, (x.index,), (dx,), check=True)


def add(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.add(a, b)
    return _binary(a, b, _val(a) + _val(b), 1.0, 1.0)


def sub(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.subtract(a, b)
    return _binary(a, b, _val(a) - _val(b), 1.0, -1.0)


def mul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.multiply(a, b)
    va, vb = _val(a), _val(b)
    return _binary(a, b, va * vb, vb, va)


def div(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.divide(a, b)
    va, vb = _val(a), _val(b)
    if np.any(vb == 0):
        raise DomainError("division by zero")
    q = va / vb
    return _binary(a, b, q, 1.0 / vb, -q / vb)


def neg(x):
    if not isinstance(x, Var):
        return np.negative(x)
    return _unary(x, -x.value, -1.0)


def square(x):
    if not isinstance(x, Var):
        return np.square(x)
    return _unary(x, np.square(x.value), 2.0 * x.value)


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    e = np.exp(x.value)
    return _unary(x, e, e)


def log(x):
    v = _val(x)
    if np.any(np.asarray(v) <= 0):
        raise DomainError("log of a non-positive value")
    if not isinstance(x, Var):
        return np.log(x)
    return _unary(x, np.log(v), 1.0 / v)


def sqrt(x):
    v = _val(x)
    if np.any(np.asarray(v) < 0):
        raise DomainError("sqrt of a negative value")
    if not isinstance(x, Var):
        return np.sqrt(x)
    s = np.sqrt(v)
    if np.any(s == 0):
        raise DomainError("sqrt is not differentiable at 0")
    return _unary(x, s, 0.5 / s)


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    t = np.tanh(x.value)
    return _unary(x, t, 1.0 - t * t)


def atanh(x):
    v = _val(x)
    if np.any(np.abs(np.asarray(v)) >= 1):
        raise DomainError("atanh requires |x| < 1")
    if not isinstance(x, Var):
        return np.arctanh(x)
    return _unary(x, np.arctanh(v), 1.0 / (1.0 - v * v))


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(x):
    if not isinstance(x, Var):
        return special.ndtr(x)
    v = x.value
    return _unary(x, special.ndtr(v), _INV_SQRT_2PI * np.exp(-0.5 * v * v))


def normal_quantile(u):
    v = _val(u)
    va = np.asarray(v)
    if np.any((va <= 0) | (va >= 1)):
        raise DomainError("normal_quantile requires u in (0, 1)")
    q = special.ndtri(v)
    if not isinstance(u, Var):
        return q
    # inverse-function rule, exact for the true quantile function
    return _unary(u, q, 1.0 / (_INV_SQRT_2PI * np.exp(-0.5 * q * q)))


def normal_logpdf(x):
    if not isinstance(x, Var):
        return -0.5 * np.square(x) - 0.5 * LOG_2PI
    v = x.value
    return _unary(x, -0.5 * v * v - 0.5 * LOG_2PI, -v)


def clip(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; the derivative is 1 inside and 0 where clamped."""
    if not isinstance(x, Var):
        return np.clip(x, lo, hi)
    v = x.value
    c = np.clip(v, lo, hi)
    inside = ((v >= lo) & (v <= hi)).astype(float)
    return _unary(x, c, inside)


def sum(x):  # noqa: A001 - mirrors numpy naming
    """Sum all entries of an array-valued node into a scalar node."""
    if not isinstance(x, Var):
        return np.sum(x)
    v = x.value
    return _unary(x, np.sum(v), np.ones_like(np.asarray(v, dtype=float)))


def stop_gradient(x):
    """Same forward value, but no adjoint flows back through the result."""
    if not isinstance(x, Var):
        return x
    return x.tape._push(x.value, (), ())


def value(x):
    """Forward value of a Var, or the input itself."""
    return _val(x)


def gradient(tape: Tape, output: Var, wrt) -> np.ndarray:
    """Adjoints of ``output`` with respect to the leaves ``wrt``, flattened.

    Leaves not connected to ``output`` get a zero gradient. A constant (non-Var)
    output yields all zeros.
    """
    wrt = list(wrt)
    if not isinstance(output, Var):
        return np.concatenate([np.zeros(np.size(w.value)) for w in wrt]) if wrt else np.zeros(0)
    adj = tape.adjoints(output)
    parts = []
    for w in wrt:
        a = adj[w.index] if w.index < len(adj) else None
        parts.append(np.zeros(np.size(w.value)) if a is None else np.ravel(a).astype(float))
    return np.concatenate(parts) if parts else np.zeros(0)
