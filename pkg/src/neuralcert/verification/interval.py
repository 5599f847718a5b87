"""Interval arithmetic and interval bound propagation for small MLPs.

All functions are elementwise/vectorized over numpy arrays and sound in the
outward-rounding-free sense used throughout: results are mathematically
correct enclosures assuming exact arithmetic, which is the standard working
assumption for IBP-style network verification at these scales.

Convention: an interval is a pair (lo, hi) of equal-shape arrays, lo <= hi.
"""

import numpy as np
from scipy.special import expit


class IntervalBox:
    """Axis-aligned box, the unit of work for grid/branch-and-bound verifiers."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape:
            raise ValueError("bound shape mismatch")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def width(self):
        return self.hi - self.lo

    @property
    def midpoint(self):
        return 0.5 * (self.lo + self.hi)

    def split(self, dim=None):
        """Bisect along `dim` (widest dimension when omitted)."""
        if dim is None:
            dim = int(np.argmax(self.width))
        mid = 0.5 * (self.lo[dim] + self.hi[dim])
        lo2 = self.lo.copy(); lo2[dim] = mid
        hi1 = self.hi.copy(); hi1[dim] = mid
        return IntervalBox(self.lo, hi1), IntervalBox(lo2, self.hi)

    def contains(self, x):
        return bool(np.all(x >= self.lo - 1e-12) and np.all(x <= self.hi + 1e-12))

    def __repr__(self):
        return f"IntervalBox(lo={self.lo}, hi={self.hi})"


# -- scalar interval primitives (elementwise over arrays) ----------------------

def iadd(a, b):
    return a[0] + b[0], a[1] + b[1]


def isub(a, b):
    return a[0] - b[1], a[1] - b[0]


def iscale(c, a):
    """Multiply interval a by exact array/scalar c."""
    lo = np.where(c >= 0, c * a[0], c * a[1])
    hi = np.where(c >= 0, c * a[1], c * a[0])
    return lo, hi


def imul(a, b):
    p1 = a[0] * b[0]
    p2 = a[0] * b[1]
    p3 = a[1] * b[0]
    p4 = a[1] * b[1]
    return (np.minimum(np.minimum(p1, p2), np.minimum(p3, p4)),
            np.maximum(np.maximum(p1, p2), np.maximum(p3, p4)))


def isquare(a):
    lo, hi = a
    straddles = (lo <= 0.0) & (hi >= 0.0)
    mn = np.where(straddles, 0.0, np.minimum(lo * lo, hi * hi))
    return mn, np.maximum(lo * lo, hi * hi)


def isin(a):
    """Sine of an interval via crest/trough membership tests."""
    lo, hi = a
    two_pi = 2.0 * np.pi
    slo, shi = np.sin(lo), np.sin(hi)
    mn = np.minimum(slo, shi)
    mx = np.maximum(slo, shi)
    # crest x = pi/2 + 2k*pi inside [lo, hi]?
    has_crest = np.floor((hi - 0.5 * np.pi) / two_pi) >= np.ceil((lo - 0.5 * np.pi) / two_pi)
    # trough x = -pi/2 + 2k*pi inside [lo, hi]?
    has_trough = np.floor((hi + 0.5 * np.pi) / two_pi) >= np.ceil((lo + 0.5 * np.pi) / two_pi)
    return np.where(has_trough, -1.0, mn), np.where(has_crest, 1.0, mx)


def icos(a):
    return isin((a[0] + 0.5 * np.pi, a[1] + 0.5 * np.pi))


def itanh(a):
    return np.tanh(a[0]), np.tanh(a[1])


def isoftplus(a):
    def sp(z):
        return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)
    return sp(a[0]), sp(a[1])


def ielu(a, alpha=1.0):
    def e(z):
        return np.where(z > 0.0, z, alpha * np.expm1(z))
    return e(a[0]), e(a[1])


def irelu(a):
    return np.maximum(a[0], 0.0), np.maximum(a[1], 0.0)


def itanh_deriv(a):
    """tanh' = 1 - tanh^2 peaks at 0, so the upper bound needs a membership test."""
    lo, hi = a
    d_lo = 1.0 - np.tanh(lo) ** 2
    d_hi = 1.0 - np.tanh(hi) ** 2
    upper = np.where((lo <= 0.0) & (hi >= 0.0), 1.0, np.maximum(d_lo, d_hi))
    return np.minimum(d_lo, d_hi), upper


def isigmoid(a):
    return expit(a[0]), expit(a[1])


def ielu_deriv(a, alpha=1.0):
    def d(z):
        return np.where(z > 0.0, 1.0, alpha * np.exp(z))
    return d(a[0]), d(a[1])


def irelu_deriv(a):
    lo, hi = a
    return (lo > 0.0).astype(np.float64), (hi > 0.0).astype(np.float64)


ACT_BOUNDS = {"tanh": itanh, "softplus": isoftplus, "elu": ielu, "relu": irelu}
ACT_DERIV_BOUNDS = {"tanh": itanh_deriv, "softplus": isigmoid,
                    "elu": ielu_deriv, "relu": irelu_deriv}


# -- linear-layer propagation ---------------------------------------------------

def iaffine(a, W, b=None):
    """Interval of x @ W (+ b) for interval x and exact W; batched over rows."""
    Wp = np.maximum(W, 0.0)
    Wm = np.minimum(W, 0.0)
    lo = a[0] @ Wp + a[1] @ Wm
    hi = a[1] @ Wp + a[0] @ Wm
    if b is not None:
        lo = lo + b
        hi = hi + b
    return lo, hi


def imatmul(a, b):
    """Interval matmul for interval operands: (..., n, k) @ (..., k, m).

    A plain four-product rule is wrong for sums of products, so the product
    intervals are formed termwise before reduction.
    """
    al = a[0][..., :, :, None]
    ah = a[1][..., :, :, None]
    bl = b[0][..., None, :, :]
    bh = b[1][..., None, :, :]
    q1 = al * bl; q2 = al * bh; q3 = ah * bl; q4 = ah * bh
    lo = np.minimum(np.minimum(q1, q2), np.minimum(q3, q4)).sum(axis=-2)
    hi = np.maximum(np.maximum(q1, q2), np.maximum(q3, q4)).sum(axis=-2)
    return lo, hi


def idot(a, b):
    """Interval dot product along the last axis."""
    pl, ph = imul(a, b)
    return pl.sum(axis=-1), ph.sum(axis=-1)


# -- network bounds --------------------------------------------------------------

def ibp_bounds(net, box):
    """Sound output enclosure of an MLP over an input box.

    `box` may be an IntervalBox or a (lo, hi) pair; batched (B, d) inputs
    are supported. Returns (lo, hi) of shape (B, out_dim) or (out_dim,).
    """
    if isinstance(box, IntervalBox):
        lo, hi = box.lo, box.hi
    else:
        lo, hi = box
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    act = ACT_BOUNDS[net.activation]
    cur = (lo, hi)
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        cur = iaffine(cur, W, b)
        if k < last:
            cur = act(cur)
    return cur


def ibp_grad_bounds(net, box):
    """Interval enclosure of the network Jacobian over a box.

    Propagates an interval Jacobian J_l = d(h_l)/dx forward through the
    layers: J_l = (J_{l-1} @ W_l) * diag(act'(z_l)). Returns (lo, hi) of
    shape (..., in_dim, out_dim).
    """
    if isinstance(box, IntervalBox):
        lo, hi = box.lo, box.hi
    else:
        lo, hi = box
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    act = ACT_BOUNDS[net.activation]
    dact = ACT_DERIV_BOUNDS[net.activation]
    d = net.widths[0]
    if lo.ndim > 1:
        eye = np.broadcast_to(np.eye(d), lo.shape[:-1] + (d, d)).copy()
    else:
        eye = np.eye(d)
    J = (eye, eye)
    cur = (lo, hi)
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = iaffine(cur, W, b)
        J = iaffine(J, W)  # exact-weight product, rows are interval vectors
        if k < last:
            dz = dact(z)
            J = imul(J, (dz[0][..., None, :], dz[1][..., None, :]))
            cur = act(z)
        else:
            cur = z
    return J
