"""Reverse-mode tape over numpy arrays, plus second-order Taylor jets.

The tape is rebuilt on every call: wrap the inputs you want gradients for in
:class:`Tensor`, compose them with the operators and the functions in this
module, then call :meth:`Tensor.backward` on a scalar result.

Elementary functions (``tanh``, ``exp`` ...) accept either plain arrays or
tensors, so the same model code runs with and without a tape. :class:`Jet`
propagates ``(value, d/dx, d2/dx2)`` forward through those same functions;
when its components are tensors, the input derivatives remain differentiable
with respect to parameters.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Jet",
    "value_and_grad",
    "grad",
    "tanh",
    "exp",
    "log",
    "sin",
    "cos",
    "softplus",
    "matmul",
    "tsum",
    "unwrap",
    "NonFiniteLossError",
]


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss handed to the tape is NaN or infinite."""

    def __init__(self, value, step=None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite loss value{where}: {value!r}")
        self.value = value
        self.step = step


def _unbroadcast(g, shape):
    # sum out axes that numpy broadcasting introduced
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """A node on the tape: an array value plus the VJPs to its parents."""

    __slots__ = ("value", "parents", "grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Tensor, vjp)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor({self.value!r})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        sa, sb = self.shape, other.shape
        return Tensor(
            self.value + other.value,
            ((self, lambda g: _unbroadcast(g, sa)), (other, lambda g: _unbroadcast(g, sb))),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        sa, sb = self.shape, other.shape
        return Tensor(
            self.value - other.value,
            ((self, lambda g: _unbroadcast(g, sa)), (other, lambda g: _unbroadcast(-g, sb))),
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return Tensor(-self.value, ((self, lambda g: -g),))

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Tensor(
            a * b,
            (
                (self, lambda g: _unbroadcast(g * b, a.shape)),
                (other, lambda g: _unbroadcast(g * a, b.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        q = a / b
        return Tensor(
            q,
            (
                (self, lambda g: _unbroadcast(g / b, a.shape)),
                (other, lambda g: _unbroadcast(-g * q / b, b.shape)),
            ),
        )

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("only integer powers are supported on the tape")
        n = int(n)
        a = self.value
        if n == 0:
            return Tensor(np.ones_like(a))
        return Tensor(a**n, ((self, lambda g: g * n * a ** (n - 1)),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # structure ------------------------------------------------------------
    def __getitem__(self, idx):
        shape = self.shape

        basic = isinstance(idx, (slice, int)) or (
            isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx)
        )

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return out

        return Tensor(self.value[idx], ((self, vjp),))

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),))

    def sum(self, axis=None):
        return tsum(self, axis)

    # backward -------------------------------------------------------------
    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _toposort(root):
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def unwrap(x):
    """Plain array value of a tensor (arrays pass through)."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unary(x, f, df):
    if not isinstance(x, Tensor):
        return f(np.asarray(x, dtype=np.float64))
    v = f(x.value)
    d = df(x.value, v)
    return Tensor(v, ((x, lambda g: g * d),))


def tanh(x):
    return _unary(x, np.tanh, lambda a, v: 1.0 - v * v)


def exp(x):
    return _unary(x, np.exp, lambda a, v: v)


def log(x):
    return _unary(x, np.log, lambda a, v: 1.0 / a)


def sin(x):
    return _unary(x, np.sin, lambda a, v: np.cos(a))


def cos(x):
    return _unary(x, np.cos, lambda a, v: -np.sin(a))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softplus(x):
    """log(1 + e^x), evaluated without overflow."""
    return _unary(x, lambda a: np.logaddexp(0.0, a), lambda a, v: _sigmoid(a))


def matmul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.asarray(a) @ np.asarray(b)
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value

    def vjp_a(g):
        return g @ bv.T if bv.ndim == 2 else np.outer(g, bv)

    def vjp_b(g):
        return av.T @ g if av.ndim == 2 else np.outer(av, g)

    return Tensor(av @ bv, ((a, vjp_a), (b, vjp_b)))


def tsum(x, axis=None):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor(np.sum(x.value, axis=axis), ((x, vjp),))


def value_and_grad(loss, theta):
    """Evaluate ``loss(Tensor(theta))`` and its gradient with respect to theta.

    Raises :class:`NonFiniteLossError` if the loss is NaN or infinite.
    """
    leaf = Tensor(np.array(theta, dtype=np.float64, copy=True))
    out = loss(leaf)
    value = float(unwrap(out))
    if not np.isfinite(value):
        raise NonFiniteLossError(value)
    if not isinstance(out, Tensor) or not _reaches(out, leaf):
        return value, np.zeros_like(leaf.value)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return value, np.asarray(g, dtype=np.float64)


def _reaches(out, leaf):
    return any(node is leaf for node in _toposort(out))


def grad(loss, theta):
    return value_and_grad(loss, theta)[1]


class Jet:
    """Second-order univariate Taylor jet ``(value, d1, d2)``.

    Components may be arrays or tensors; all arithmetic obeys the chain rule
    for first and second derivatives along one input direction.
    """

    __slots__ = ("value", "d1", "d2")

    def __init__(self, value, d1=0.0, d2=0.0):
        self.value = value
        self.d1 = d1
        self.d2 = d2

    @classmethod
    def variable(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.ones_like(x), np.zeros_like(x))

    @classmethod
    def constant(cls, c):
        c = np.asarray(c, dtype=np.float64)
        return cls(c, np.zeros_like(c), np.zeros_like(c))

    def __repr__(self):
        return f"Jet({unwrap(self.value)!r}, {unwrap(self.d1)!r}, {unwrap(self.d2)!r})"

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value + other.value, self.d1 + other.d1, self.d2 + other.d2)
        return Jet(self.value + other, self.d1, self.d2)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value - other.value, self.d1 - other.d1, self.d2 - other.d2)
        return Jet(self.value - other, self.d1, self.d2)

    def __rsub__(self, other):
        return Jet(other - self.value, -self.d1, -self.d2)

    def __neg__(self):
        return Jet(-self.value, -self.d1, -self.d2)

    def __mul__(self, other):
        if isinstance(other, Jet):
            a, b = self, other
            return Jet(
                a.value * b.value,
                a.d1 * b.value + a.value * b.d1,
                a.d2 * b.value + 2.0 * (a.d1 * b.d1) + a.value * b.d2,
            )
        return Jet(self.value * other, self.d1 * other, self.d2 * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            q = self.value / other.value
            q1 = (self.d1 - q * other.d1) / other.value
            q2 = (self.d2 - 2.0 * (q1 * other.d1) - q * other.d2) / other.value
            return Jet(q, q1, q2)
        return Jet(self.value / other, self.d1 / other, self.d2 / other)

    def __rtruediv__(self, other):
        return Jet(other, 0.0, 0.0) / self

    def __pow__(self, n):
        n = int(n)
        if n == 0:
            return Jet.constant(np.ones_like(unwrap(self.value)))
        a = self.value
        f = a**n
        df = n * a ** (n - 1)
        ddf = n * (n - 1) * a ** (n - 2) if n >= 2 else 0.0 * a
        return _compose(self, f, df, ddf)

    def matmul(self, w):
        """Right-multiply every component by a (jet-constant) matrix."""
        return Jet(matmul(self.value, w), matmul(self.d1, w), matmul(self.d2, w))

    def map(self, fn):
        """Apply a structural (linear) map, e.g. indexing, to each component."""
        return Jet(fn(self.value), fn(self.d1), fn(self.d2))


def _compose(a, f, df, ddf):
    return Jet(f, df * a.d1, ddf * (a.d1 * a.d1) + df * a.d2)


def jet_tanh(a: Jet) -> Jet:
    t = tanh(a.value)
    s = 1.0 - t * t
    return _compose(a, t, s, -2.0 * t * s)


def jet_exp(a: Jet) -> Jet:
    e = exp(a.value)
    return _compose(a, e, e, e)


def jet_log(a: Jet) -> Jet:
    inv = 1.0 / a.value
    return _compose(a, log(a.value), inv, -(inv * inv))


def jet_sin(a: Jet) -> Jet:
    s, c = sin(a.value), cos(a.value)
    return _compose(a, s, c, -s)


def jet_cos(a: Jet) -> Jet:
    s, c = sin(a.value), cos(a.value)
    return _compose(a, c, -s, -c)


__all__ += ["jet_tanh", "jet_exp", "jet_log", "jet_sin", "jet_cos"]
