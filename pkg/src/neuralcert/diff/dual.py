"""Forward-mode derivatives as dual numbers whose parts are tape tensors.

A Dual carries (primal, tangent). Every rule below is written in terms of
recorded tensor operations, so a directional derivative computed this way is
itself differentiable: reverse mode applied on top yields exact
parameter-gradients of Lie derivatives (forward-over-reverse).
"""

from .tensor import Tensor, as_tensor, concat as _tconcat, bmm as _tbmm


class Dual:
    __slots__ = ("primal", "tangent")

    __array_ufunc__ = None

    def __init__(self, primal, tangent):
        self.primal = as_tensor(primal)
        self.tangent = as_tensor(tangent)
        if self.primal.data.shape != self.tangent.data.shape:
            raise ValueError("primal/tangent shape mismatch: "
                             f"{self.primal.data.shape} vs {self.tangent.data.shape}")

    @property
    def shape(self):
        return self.primal.data.shape

    def __repr__(self):
        return f"Dual(shape={self.primal.data.shape})"

    # -- arithmetic; non-Dual operands are constants in the tangent sense ------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal + other.primal, self.tangent + other.tangent)
        return Dual(self.primal + other, self.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal - other.primal, self.tangent - other.tangent)
        return Dual(self.primal - other, self.tangent)

    def __rsub__(self, other):
        return Dual(other - self.primal, -self.tangent)

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal * other.primal,
                        self.tangent * other.primal + self.primal * other.tangent)
        return Dual(self.primal * other, self.tangent * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.primal
            return Dual(self.primal * inv,
                        (self.tangent - self.primal * inv * other.tangent) * inv)
        return Dual(self.primal / other, self.tangent / other)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal @ other.primal,
                        self.tangent @ other.primal + self.primal @ other.tangent)
        o = as_tensor(other)
        return Dual(self.primal @ o, self.tangent @ o)

    def __rmatmul__(self, other):
        o = as_tensor(other)
        return Dual(o @ self.primal, o @ self.tangent)

    def __getitem__(self, idx):
        return Dual(self.primal[idx], self.tangent[idx])

    def reshape(self, *shape):
        return Dual(self.primal.reshape(*shape), self.tangent.reshape(*shape))

    def bt(self):
        return Dual(self.primal.bt(), self.tangent.bt())

    def sum(self, axis=None, keepdims=False):
        return Dual(self.primal.sum(axis, keepdims), self.tangent.sum(axis, keepdims))

    def mean(self, axis=None, keepdims=False):
        return Dual(self.primal.mean(axis, keepdims), self.tangent.mean(axis, keepdims))

    # -- nonlinear rules --------------------------------------------------------

    def square(self):
        return Dual(self.primal.square(), 2.0 * self.primal * self.tangent)

    def tanh(self):
        y = self.primal.tanh()
        return Dual(y, (1.0 - y.square()) * self.tangent)

    def sigmoid(self):
        y = self.primal.sigmoid()
        return Dual(y, y * (1.0 - y) * self.tangent)

    def softplus(self):
        return Dual(self.primal.softplus(), self.primal.sigmoid() * self.tangent)

    def elu(self, alpha=1.0):
        return Dual(self.primal.elu(alpha), self.primal.elu_deriv(alpha) * self.tangent)

    def relu(self):
        return Dual(self.primal.relu(), self.primal.step() * self.tangent)

    def sin(self):
        return Dual(self.primal.sin(), self.primal.cos() * self.tangent)

    def cos(self):
        return Dual(self.primal.cos(), -self.primal.sin() * self.tangent)


def concat(items, axis=1):
    if any(isinstance(t, Dual) for t in items):
        prim = [t.primal if isinstance(t, Dual) else as_tensor(t) for t in items]
        tang = [t.tangent if isinstance(t, Dual)
                else as_tensor(_zero_like(t)) for t in items]
        return Dual(_tconcat(prim, axis), _tconcat(tang, axis))
    return _tconcat(items, axis)


def bmm(a, b):
    a_dual = isinstance(a, Dual)
    b_dual = isinstance(b, Dual)
    if not a_dual and not b_dual:
        return _tbmm(a, b)
    ap = a.primal if a_dual else as_tensor(a)
    bp = b.primal if b_dual else as_tensor(b)
    prim = _tbmm(ap, bp)
    if a_dual and b_dual:
        tang = _tbmm(a.tangent, bp) + _tbmm(ap, b.tangent)
    elif a_dual:
        tang = _tbmm(a.tangent, bp)
    else:
        tang = _tbmm(ap, b.tangent)
    return Dual(prim, tang)


def _zero_like(t):
    import numpy as np
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return np.zeros_like(data)


def lift(x, tangent=None):
    """Wrap x as a Dual with the given tangent (zero if omitted)."""
    xt = as_tensor(x)
    if tangent is None:
        return Dual(xt, _zero_like(xt))
    return Dual(xt, tangent)


def directional_derivative(fn, x, v):
    """grad(fn)(x) . v by one forward-mode pass.

    `fn` must be built from recorded primitives (tensor/dual ops), so the
    returned tangent is itself on the tape: parameter gradients of the
    directional derivative exist.
    """
    xt = as_tensor(x)
    vt = as_tensor(v)
    if xt.data.shape != vt.data.shape:
        raise ValueError(f"direction shape {vt.data.shape} does not match "
                         f"input shape {xt.data.shape}")
    out = fn(Dual(xt, vt))
    if not isinstance(out, Dual):
        raise TypeError("fn must propagate Dual inputs")
    return out.tangent
