"""Reverse-mode autodiff over dense numpy arrays.

A Tape records every operation applied to watched tensors; backward() walks
the record once, accumulating adjoints in reverse creation order. Creation
order is deterministic, so gradient accumulation order is too, which keeps
whole training runs bit-reproducible.

Tensors are thin wrappers around float64 ndarrays. Operations run eagerly;
recording only happens when some input is attached to a tape, so the same
code path serves training (taped) and evaluation (tape-free).
"""

import numpy as np
from scipy.special import expit


def _asarray(x):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite tensor data")
    return a


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of tensor operations for one backward pass."""

    def __init__(self):
        self._nodes = []

    def watch(self, data) -> "Tensor":
        """Register a leaf whose gradient will be tracked."""
        t = Tensor(_asarray(data).copy(), tape=self)
        self._nodes.append(t)
        return t

    def _append(self, t):
        self._nodes.append(t)

    def backward(self, loss: "Tensor", wrt) -> list:
        """Gradients of a scalar `loss` w.r.t. the tensors in `wrt`.

        Unused leaves get zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        adjoint = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = adjoint.get(id(node))
            if g is None or not node._parents:
                continue  # leaf adjoints stay for collection below
            del adjoint[id(node)]
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = adjoint.get(id(p))
                # out-of-place: stored adjoints may alias g or each other
                adjoint[id(p)] = pg if acc is None else acc + pg
        return [adjoint.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def replay(self):
        """Recompute every recorded node's data in creation order.

        Leaves keep their current data. Used to check the record is a faithful,
        bit-reproducible description of the forward pass.
        """
        for node in self._nodes:
            if node._fwd is not None:
                node.data = node._fwd()


def _result_tape(*tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def as_tensor(x, tape=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(_asarray(x), tape=tape)


def _defer(other):
    """True when a binary op should defer to the other operand (a Dual)."""
    return hasattr(other, "tangent")


class Tensor:
    __slots__ = ("data", "tape", "_parents", "_vjp", "_fwd")

    # numpy must defer to our reflected operators instead of broadcasting
    # elementwise over this object
    __array_ufunc__ = None

    def __init__(self, data, tape=None, parents=(), vjp=None, fwd=None):
        self.data = data
        self.tape = tape
        self._parents = parents
        self._vjp = vjp
        self._fwd = fwd
        if tape is not None and parents:
            tape._append(self)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def const(x) -> "Tensor":
        return as_tensor(x)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"

    # -- generic node factory -------------------------------------------------

    def _node(self, data, parents, vjp, fwd):
        tape = _result_tape(*parents)
        if tape is None:
            return Tensor(data)
        return Tensor(data, tape=tape, parents=parents, vjp=vjp, fwd=fwd)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if _defer(other):
            return NotImplemented
        o = as_tensor(other)
        out = self.data + o.data
        return self._node(
            out, (self, o),
            lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(g, o.data.shape)),
            lambda: self.data + o.data)

    __radd__ = __add__

    def __sub__(self, other):
        if _defer(other):
            return NotImplemented
        o = as_tensor(other)
        return self._node(
            self.data - o.data, (self, o),
            lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(-g, o.data.shape)),
            lambda: self.data - o.data)

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        if _defer(other):
            return NotImplemented
        o = as_tensor(other)
        return self._node(
            self.data * o.data, (self, o),
            lambda g: (_unbroadcast(g * o.data, self.data.shape),
                       _unbroadcast(g * self.data, o.data.shape)),
            lambda: self.data * o.data)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _defer(other):
            return NotImplemented
        o = as_tensor(other)
        return self._node(
            self.data / o.data, (self, o),
            lambda g: (_unbroadcast(g / o.data, self.data.shape),
                       _unbroadcast(-g * self.data / (o.data * o.data), o.data.shape)),
            lambda: self.data / o.data)

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        return self._node(-self.data, (self,), lambda g: (-g,), lambda: -self.data)

    def __matmul__(self, other):
        if _defer(other):
            return NotImplemented
        o = as_tensor(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ValueError("use bmm for batched matmul")
        return self._node(
            self.data @ o.data, (self, o),
            lambda g: (g @ o.data.T, self.data.T @ g),
            lambda: self.data @ o.data)

    def __getitem__(self, idx):
        def vjp(g):
            z = np.zeros_like(self.data)
            z[idx] = g
            return (z,)
        return self._node(self.data[idx], (self,), vjp, lambda: self.data[idx])

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return self._node(
            self.data.reshape(shape), (self,),
            lambda g: (g.reshape(old),),
            lambda: self.data.reshape(shape))

    def bt(self):
        """Transpose the last two axes (batched matrix transpose)."""
        return self._node(
            np.swapaxes(self.data, -1, -2), (self,),
            lambda g: (np.swapaxes(g, -1, -2),),
            lambda: np.swapaxes(self.data, -1, -2))

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._node(self.data.sum(axis=axis, keepdims=keepdims),
                          (self,), vjp,
                          lambda: self.data.sum(axis=axis, keepdims=keepdims))

    def mean(self, axis=None, keepdims=False):
        shape = self.data.shape
        count = self.data.size if axis is None else shape[axis]

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        return self._node(self.data.mean(axis=axis, keepdims=keepdims),
                          (self,), vjp,
                          lambda: self.data.mean(axis=axis, keepdims=keepdims))

    # -- elementwise nonlinearities --------------------------------------------

    def square(self):
        return self._node(self.data * self.data, (self,),
                          lambda g: (2.0 * self.data * g,),
                          lambda: self.data * self.data)

    def tanh(self):
        out = self._node(np.tanh(self.data), (self,), None, lambda: np.tanh(self.data))
        out_ref = out
        out._vjp = lambda g: (g * (1.0 - out_ref.data * out_ref.data),)
        return out

    def sigmoid(self):
        out = self._node(expit(self.data), (self,), None, lambda: expit(self.data))
        out_ref = out
        out._vjp = lambda g: (g * out_ref.data * (1.0 - out_ref.data),)
        return out

    def softplus(self):
        # log(1+e^z) in the overflow-safe form log1p(e^{-|z|}) + max(z, 0)
        def f():
            z = self.data
            return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)
        return self._node(f(), (self,), lambda g: (g * expit(self.data),), f)

    def elu(self, alpha=1.0):
        def f():
            z = self.data
            return np.where(z > 0.0, z, alpha * np.expm1(z))
        return self._node(
            f(), (self,),
            lambda g: (g * np.where(self.data > 0.0, 1.0, alpha * np.exp(self.data)),),
            f)

    def elu_deriv(self, alpha=1.0):
        """elu'(z); differentiable, used by the forward-mode rules."""
        def f():
            z = self.data
            return np.where(z > 0.0, 1.0, alpha * np.exp(z))
        return self._node(
            f(), (self,),
            lambda g: (g * np.where(self.data > 0.0, 0.0, alpha * np.exp(self.data)),),
            f)

    def relu(self):
        return self._node(np.maximum(self.data, 0.0), (self,),
                          lambda g: (g * (self.data > 0.0),),
                          lambda: np.maximum(self.data, 0.0))

    hinge = relu

    def step(self):
        """Heaviside step (relu'); zero gradient almost everywhere."""
        return self._node((self.data > 0.0).astype(np.float64), (self,),
                          lambda g: (np.zeros_like(self.data),),
                          lambda: (self.data > 0.0).astype(np.float64))

    def sin(self):
        return self._node(np.sin(self.data), (self,),
                          lambda g: (g * np.cos(self.data),),
                          lambda: np.sin(self.data))

    def cos(self):
        return self._node(np.cos(self.data), (self,),
                          lambda g: (-g * np.sin(self.data),),
                          lambda: np.cos(self.data))


def concat(tensors, axis=1):
    ts = [as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for k in range(len(ts)):
            sl[axis] = slice(offsets[k], offsets[k + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    data = np.concatenate(datas, axis=axis)
    tape = _result_tape(*ts)
    if tape is None:
        return Tensor(data)
    return Tensor(data, tape=tape, parents=tuple(ts), vjp=vjp,
                  fwd=lambda: np.concatenate([t.data for t in ts], axis=axis))


def bmm(a, b):
    """Batched matmul over leading batch axis: (B,n,k) @ (B,k,m) -> (B,n,m).

    Also accepts (B,k) on the right, treated as (B,k,1) -> (B,n).
    """
    at = as_tensor(a)
    bt_ = as_tensor(b)
    squeeze = bt_.data.ndim == 2
    bd = bt_.data[..., None] if squeeze else bt_.data

    def fwd():
        rd = bt_.data[..., None] if squeeze else bt_.data
        out = np.matmul(at.data, rd)
        return out[..., 0] if squeeze else out

    def vjp(g):
        gg = g[..., None] if squeeze else g
        rd = bt_.data[..., None] if squeeze else bt_.data
        da = np.matmul(gg, np.swapaxes(rd, -1, -2))
        db = np.matmul(np.swapaxes(at.data, -1, -2), gg)
        return (da, db[..., 0] if squeeze else db)

    out = np.matmul(at.data, bd)
    data = out[..., 0] if squeeze else out
    tape = _result_tape(at, bt_)
    if tape is None:
        return Tensor(data)
    return Tensor(data, tape=tape, parents=(at, bt_), vjp=vjp, fwd=fwd)


def sym_eigvals(M):
    """Eigenvalues (ascending) of a batch of symmetric matrices (B,n,n) -> (B,n).

    Backward uses dlambda_i = v_i' dM v_i, valid a.e. (distinct eigenvalues).
    """
    Mt = as_tensor(M)
    w, v = np.linalg.eigh(Mt.data)

    def fwd():
        return np.linalg.eigh(Mt.data)[0]

    def vjp(g):
        # vectors from the forward factorization of the current data
        _, vecs = np.linalg.eigh(Mt.data)
        return (np.einsum("...i,...ji,...ki->...jk", g, vecs, vecs),)

    tape = _result_tape(Mt)
    if tape is None:
        return Tensor(w)
    return Tensor(w, tape=tape, parents=(Mt,), vjp=vjp, fwd=fwd)


def sym_eig_small(M, tol=1e-9):
    """Eigendecomposition of one small symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns). Raises on
    asymmetric input (beyond `tol`) or n > 8; this helper is for the tiny
    matrices that appear in contraction conditions, not general linear algebra.
    """
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] > 8:
        raise ValueError("sym_eig_small handles matrices up to 8x8")
    if np.max(np.abs(A - A.T)) > tol:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (A + A.T))
    return w, v


def custom_node(data, parents, vjp, fwd=None):
    """Public hook for modules that define their own differentiable ops."""
    parents = tuple(as_tensor(p) for p in parents)
    tape = _result_tape(*parents)
    if tape is None:
        return Tensor(_asarray(data))
    return Tensor(_asarray(data), tape=tape, parents=parents, vjp=vjp, fwd=fwd)
