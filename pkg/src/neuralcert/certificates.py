"""Certificate function families and their residuals.

Sign conventions used across the package:

* Lyapunov / control Lyapunov: V >= 0 with V(goal) = 0, and the decrease
  condition Vdot <= -c V (plus a relaxation when enforced through a QP).
* Barrier: h <= 0 on states meant to be reachable safely, h > 0 on states
  that must never be reached; forward invariance asks hdot <= -gamma h.
* Contraction: M(x) symmetric with m_lo I <= M <= m_hi I and
  Mdot + J'M + M J + 2 lam M <= -eps I along the closed loop, J the
  closed-loop Jacobian.

Every certificate is callable on batched states (B, n) and accepts plain
arrays, taped tensors, or duals; the result has the kind of the input, so
the same object serves simulation, training losses (through watched
parameters) and directional derivatives. Interval bound methods back the
sound verification paths.
"""

import numpy as np

from .diff.dual import Dual
from .diff.dual import concat as dual_concat
from .diff.tensor import as_tensor, bmm, sym_eigvals
from .diff.mlp import forward
from .verification import interval as iv

CERTIFICATE_KINDS = ("lyapunov", "clf", "cbf", "contraction")


def _is_array(x):
    return isinstance(x, np.ndarray)


def _check_batched(x, dim):
    if x.shape[-1] != dim or len(x.shape) != 2:
        raise ValueError(f"expected batched states (B, {dim}), got {x.shape}")


class FeatureMap:
    """Replaces each angular coordinate by its (sin, cos) pair.

    Output layout: the non-angular coordinates in their original order,
    then one (sin, cos) pair per angular dimension, in ascending dimension
    order. With no angular dimensions this is the identity.
    """

    def __init__(self, dim, angular_dims=()):
        self.dim = int(dim)
        self.angular_dims = tuple(sorted(int(d) for d in angular_dims))
        if len(set(self.angular_dims)) != len(self.angular_dims):
            raise ValueError("duplicate angular dimension")
        if any(d < 0 or d >= self.dim for d in self.angular_dims):
            raise ValueError("angular dimension out of range")
        self.linear_dims = tuple(i for i in range(self.dim)
                                 if i not in self.angular_dims)
        self.out_dim = len(self.linear_dims) + 2 * len(self.angular_dims)

    def __call__(self, x):
        if not self.angular_dims:
            return x
        if _is_array(x):
            parts = [x[..., list(self.linear_dims)]]
            for a in self.angular_dims:
                parts.append(np.sin(x[..., a: a + 1]))
                parts.append(np.cos(x[..., a: a + 1]))
            return np.concatenate(parts, axis=-1)
        parts = []
        for i in self.linear_dims:
            parts.append(x[:, i: i + 1])
        for a in self.angular_dims:
            th = x[:, a: a + 1]
            parts.append(th.sin())
            parts.append(th.cos())
        return dual_concat(parts, axis=1)

    def interval(self, box):
        """Feature enclosure of a state box; box is a (lo, hi) pair."""
        lo, hi = box
        if not self.angular_dims:
            return lo, hi
        plo = [lo[..., list(self.linear_dims)]]
        phi = [hi[..., list(self.linear_dims)]]
        for a in self.angular_dims:
            th = (lo[..., a: a + 1], hi[..., a: a + 1])
            slo, shi = iv.isin(th)
            clo, chi = iv.icos(th)
            plo += [slo, clo]
            phi += [shi, chi]
        return np.concatenate(plo, axis=-1), np.concatenate(phi, axis=-1)

    def jacobian_interval(self, box):
        """Enclosure of d(features)/dx over a box, shape (..., dim, out_dim)."""
        lo, hi = box
        shape = lo.shape[:-1] + (self.dim, self.out_dim)
        jlo = np.zeros(shape)
        jhi = np.zeros(shape)
        for pos, i in enumerate(self.linear_dims):
            jlo[..., i, pos] = 1.0
            jhi[..., i, pos] = 1.0
        base = len(self.linear_dims)
        for k, a in enumerate(self.angular_dims):
            th = (lo[..., a], hi[..., a])
            clo, chi = iv.icos(th)   # d sin = cos
            slo, shi = iv.isin(th)   # d cos = -sin
            jlo[..., a, base + 2 * k] = clo
            jhi[..., a, base + 2 * k] = chi
            jlo[..., a, base + 2 * k + 1] = -shi
            jhi[..., a, base + 2 * k + 1] = -slo
        return jlo, jhi


class NormSquaredCertificate:
    """V(x) = |w(x) - w(goal)|^2 for a learned map w, positive semidefinite
    by construction and exactly zero at the goal."""

    kind = "clf"

    def __init__(self, net, goal, features=None):
        self.net = net
        self.goal = np.asarray(goal, dtype=np.float64)
        self.features = features or FeatureMap(self.goal.shape[0])
        if self.features.dim != self.goal.shape[0]:
            raise ValueError("feature map dimension does not match the goal")
        if net.in_dim != self.features.out_dim:
            raise ValueError("network input width does not match the features")

    @property
    def dim(self):
        return self.features.dim

    def _goal_output(self):
        return forward(self.net, self.features(self.goal[None]))[0]

    def __call__(self, x, params=None):
        if _is_array(x) and params is None:
            _check_batched(x, self.dim)
            om = forward(self.net, self.features(x))
            d = om - self._goal_output()
            return (d * d).sum(axis=-1)
        _check_batched(x, self.dim)
        om = self.net.apply(self.features(x), params)
        omg = self.net.apply(self.features(as_tensor(self.goal[None])), params)
        d = om - omg  # (B, k) - (1, k) broadcasts
        return d.square().sum(axis=-1)

    def gradient(self, x):
        """Plain-array gradient (B, n) via one directional pass per axis."""
        x = np.asarray(x, dtype=np.float64)
        _check_batched(x, self.dim)
        cols = []
        for i in range(self.dim):
            t = np.zeros_like(x)
            t[:, i] = 1.0
            d = self(Dual(as_tensor(x), as_tensor(t)))
            cols.append(d.tangent.data)
        return np.stack(cols, axis=-1)

    # -- interval bounds -------------------------------------------------------

    def value_bounds(self, box):
        fbox = self.features.interval(box)
        olo, ohi = iv.ibp_bounds(self.net, fbox)
        og = self._goal_output()
        d = (olo - og, ohi - og)
        slo, shi = iv.isquare(d)
        return slo.sum(axis=-1), shi.sum(axis=-1)

    def gradient_bounds(self, box):
        """Enclosure of grad V over the box, shape (..., n)."""
        fbox = self.features.interval(box)
        Jn = iv.ibp_grad_bounds(self.net, fbox)          # (fdim, k)
        og = self._goal_output()
        olo, ohi = iv.ibp_bounds(self.net, fbox)
        d = (olo[..., None] - og[:, None], ohi[..., None] - og[:, None])
        t = iv.imatmul(Jn, d)                            # (fdim, 1)
        Jf = self.features.jacobian_interval(box)        # (dim, fdim)
        g = iv.imatmul(Jf, t)                            # (dim, 1)
        return 2.0 * g[0][..., 0], 2.0 * g[1][..., 0]


class ScalarCertificate:
    """Raw scalar network output, the barrier-function family."""

    kind = "cbf"

    def __init__(self, net, features=None, dim=None):
        self.net = net
        if features is None:
            if dim is None:
                raise ValueError("give a feature map or the state dimension")
            features = FeatureMap(dim)
        self.features = features
        if net.in_dim != self.features.out_dim:
            raise ValueError("network input width does not match the features")
        if net.widths[-1] != 1:
            raise ValueError("barrier network must have one output")

    @property
    def dim(self):
        return self.features.dim

    def __call__(self, x, params=None):
        if _is_array(x) and params is None:
            _check_batched(x, self.dim)
            return forward(self.net, self.features(x))[..., 0]
        _check_batched(x, self.dim)
        out = self.net.apply(self.features(x), params)
        return out[:, 0]

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_batched(x, self.dim)
        cols = []
        for i in range(self.dim):
            t = np.zeros_like(x)
            t[:, i] = 1.0
            d = self(Dual(as_tensor(x), as_tensor(t)))
            cols.append(d.tangent.data)
        return np.stack(cols, axis=-1)

    def value_bounds(self, box):
        fbox = self.features.interval(box)
        olo, ohi = iv.ibp_bounds(self.net, fbox)
        return olo[..., 0], ohi[..., 0]

    def gradient_bounds(self, box):
        fbox = self.features.interval(box)
        Jn = iv.ibp_grad_bounds(self.net, fbox)          # (fdim, 1)
        Jf = self.features.jacobian_interval(box)        # (dim, fdim)
        g = iv.imatmul(Jf, Jn)
        return g[0][..., 0], g[1][..., 0]


class QuadraticCertificate:
    """V(x) = (x - goal)' P (x - goal) for a fixed symmetric positive
    definite P; the closed-form baseline the learned functions compete with."""

    kind = "lyapunov"

    def __init__(self, P, goal=None):
        P = np.asarray(P, dtype=np.float64)
        if not np.allclose(P, P.T, atol=1e-10):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("P must be positive definite")
        self.P = P
        self.goal = (np.zeros(P.shape[0]) if goal is None
                     else np.asarray(goal, dtype=np.float64))

    @property
    def dim(self):
        return self.P.shape[0]

    def __call__(self, x, params=None):
        if _is_array(x):
            _check_batched(x, self.dim)
            d = x - self.goal
            return ((d @ self.P) * d).sum(axis=-1)
        _check_batched(x, self.dim)
        d = x - self.goal[None]
        return (d @ self.P * d).sum(axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_batched(x, self.dim)
        return 2.0 * (x - self.goal) @ self.P

    def value_bounds(self, box):
        lo, hi = box
        d = (lo - self.goal, hi - self.goal)
        y = iv.iaffine(d, self.P)
        plo, phi = iv.imul((d[0], d[1]), y)
        return plo.sum(axis=-1), phi.sum(axis=-1)

    def gradient_bounds(self, box):
        lo, hi = box
        d = (lo - self.goal, hi - self.goal)
        glo, ghi = iv.iaffine(d, self.P)
        return 2.0 * glo, 2.0 * ghi


class MetricCertificate:
    """Learned state-dependent metric M(x) = A(x) + A(x)' + shift I, where
    A is the network output reshaped to (n, n). Symmetry is structural;
    positive definiteness and the upper bound are trained, not built in."""

    kind = "contraction"

    def __init__(self, net, dim, features=None, shift=0.0):
        self.net = net
        self.state_dim = int(dim)
        self.features = features or FeatureMap(dim)
        if net.in_dim != self.features.out_dim:
            raise ValueError("network input width does not match the features")
        if net.widths[-1] != self.state_dim ** 2:
            raise ValueError(
                f"metric network must output {self.state_dim ** 2} entries")
        self.shift = float(shift)

    @property
    def dim(self):
        return self.state_dim

    def matrix(self, x, params=None):
        n = self.state_dim
        if _is_array(x) and params is None:
            _check_batched(x, self.dim)
            A = forward(self.net, self.features(x)).reshape(-1, n, n)
            M = A + np.swapaxes(A, -1, -2)
            if self.shift:
                M = M + self.shift * np.eye(n)
            return M
        _check_batched(x, self.dim)
        out = self.net.apply(self.features(x), params)
        A = out.reshape((-1, n, n))
        M = A + A.bt()
        if self.shift:
            M = M + self.shift * np.eye(n)
        return M

    def __call__(self, x, params=None):
        return self.matrix(x, params)


# -- Lie derivatives and residuals ------------------------------------------------


class CertificateSpec:
    """A certificate family frozen together with its training constants.

    kind picks the condition set; rate is c (clf), gamma (cbf), or lambda
    (contraction); weights maps condition names to penalty coefficients;
    dt is the step for finite-difference decrease terms. Contraction specs
    also carry the eigenvalue corridor [m_lo, m_hi], the strictness margin
    eps_nd, and the policy trained alongside the metric.
    """

    def __init__(self, kind, certificate, rate, weights=None, dt=0.01,
                 policy=None, m_lo=0.1, m_hi=10.0, eps_nd=0.01):
        if kind not in CERTIFICATE_KINDS:
            raise ValueError(f"unknown certificate kind {kind!r}")
        if rate <= 0:
            raise ValueError("rate constant must be positive")
        if dt <= 0:
            raise ValueError("finite-difference step must be positive")
        weights = dict(weights or {})
        for name, w in weights.items():
            if w < 0:
                raise ValueError(f"negative weight for condition {name!r}")
        self.kind = kind
        self.certificate = certificate
        self.rate = float(rate)
        self.weights = weights
        self.dt = float(dt)
        self.policy = policy
        self.m_lo = float(m_lo)
        self.m_hi = float(m_hi)
        self.eps_nd = float(eps_nd)


def clf_condition_set(spec, system, x, u, r, params=None):
    """Per-sample residual batches for the CLF conditions at (x, u, r).

    u and r come from the relaxed QP; they may be taped tensors, in which
    case gradients flow through the solver's KKT system as well as the
    certificate network. Names: goal (V at the goal state), positivity
    (-V, satisfied when V >= 0), relax (the QP slack), decrease (the exact
    Lie derivative along the applied control), decrease_fd (the one-step
    finite-difference quotient at spec.dt).
    """
    cert = spec.certificate
    x = np.asarray(x, dtype=np.float64)
    V, LfV, LgV = lie_derivatives(cert, system, x, params=params)
    f = system.f(x)
    g = system.g(x)
    B, m = x.shape[0], g.shape[-1]
    if params is None and _is_array(u):
        goal = cert(cert_goal(cert)[None])
        decrease = LfV + (LgV * u).sum(axis=-1)
        xdot = f + (g @ u[..., None])[..., 0]
        V2 = cert(x + spec.dt * xdot)
        fd = (V2 - V) / spec.dt
        return {"goal": goal, "positivity": -V, "relax": r,
                "decrease": decrease, "decrease_fd": fd}
    goal = cert(as_tensor(cert_goal(cert)[None]), params=params)
    u_t = as_tensor(u)
    decrease = LfV + (LgV * u_t).sum(axis=-1)
    xdot = as_tensor(f) + bmm(as_tensor(g), u_t.reshape((B, m, 1))).reshape((B, -1))
    V2 = cert(as_tensor(x) + spec.dt * xdot, params=params)
    fd = (V2 - V) * (1.0 / spec.dt)
    return {"goal": goal, "positivity": -V, "relax": as_tensor(r),
            "decrease": decrease, "decrease_fd": fd}


def cert_goal(cert):
    goal = getattr(cert, "goal", None)
    if goal is None:
        raise ValueError("certificate has no goal state")
    return goal


def cbf_condition_set(spec, x_safe, x_unsafe, r, params=None):
    """Residual batches for the barrier sign conditions plus the QP slack.

    Safe states must have h <= 0 and unsafe states h >= 0 (h > 0 marks the
    forbidden region), so the residuals are h on the safe batch and -h on
    the unsafe one. Both label sets must be non-empty; a one-sided dataset
    cannot pin down a boundary.
    """
    if len(x_safe) == 0 or len(x_unsafe) == 0:
        raise ValueError("need both safe and unsafe samples")
    cert = spec.certificate
    if params is None:
        return {"safe_sign": cert(np.asarray(x_safe, dtype=np.float64)),
                "unsafe_sign": -cert(np.asarray(x_unsafe, dtype=np.float64)),
                "relax": r}
    hs = cert(as_tensor(np.asarray(x_safe, dtype=np.float64)), params=params)
    hu = cert(as_tensor(np.asarray(x_unsafe, dtype=np.float64)), params=params)
    return {"safe_sign": hs, "unsafe_sign": -hu, "relax": as_tensor(r)}


def contraction_condition_set(spec, system, x, u, jac_cl, params=None):
    """Eigenvalue-hinge residuals for the metric corridor and the LMI.

    Per sample: metric_lower sums max(m_lo - eig_i(M), 0), metric_upper
    sums max(eig_i(M) - m_hi, 0), and contraction sums
    max(eig_i(C) + eps_nd, 0) for C the decrease matrix along the closed
    loop. The margin eps_nd makes the trained inequality strict.
    """
    if system.n > 8:
        raise ValueError("eigenvalue hinges support state dimension <= 8")
    M, C = contraction_residuals(spec.certificate, system, x, u, jac_cl,
                                 lam=spec.rate, params=params)
    if params is None:
        wM = np.linalg.eigvalsh(M)
        wC = np.linalg.eigvalsh(C)
        return {"metric_lower": np.maximum(spec.m_lo - wM, 0.0).sum(axis=-1),
                "metric_upper": np.maximum(wM - spec.m_hi, 0.0).sum(axis=-1),
                "contraction": np.maximum(wC + spec.eps_nd, 0.0).sum(axis=-1)}
    wM = sym_eigvals(M)
    wC = sym_eigvals(C)
    return {"metric_lower": (spec.m_lo - wM).relu().sum(axis=-1),
            "metric_upper": (wM - spec.m_hi).relu().sum(axis=-1),
            "contraction": (wC + spec.eps_nd).relu().sum(axis=-1)}


def loss_terms(residuals, weights):
    """Weighted hinge-means, one per condition.

    Every residual batch needs a weight and every weight a batch; a
    mismatch is a config bug worth failing on. Batches must be non-empty.
    """
    extra = set(weights) - set(residuals)
    if extra:
        raise ValueError(f"weights for unknown conditions: {sorted(extra)}")
    missing = set(residuals) - set(weights)
    if missing:
        raise ValueError(f"conditions without weights: {sorted(missing)}")
    terms = {}
    for name, res in residuals.items():
        w = weights[name]
        if w < 0:
            raise ValueError(f"negative weight for condition {name!r}")
        if res.shape[0] == 0:
            raise ValueError(f"empty residual batch for condition {name!r}")
        if _is_array(res):
            terms[name] = w * np.maximum(res, 0.0).mean()
        else:
            terms[name] = w * res.relu().mean()
    return terms


def empirical_loss(residuals, weights):
    """Scalar training loss: the sum of weighted hinge-means.

    Zero if and only if every weighted residual is nonpositive throughout
    its batch.
    """
    total = None
    for term in loss_terms(residuals, weights).values():
        total = term if total is None else total + term
    return total


def lie_derivatives(cert, system, x, params=None):
    """(V, LfV, LgV) at batched states.

    x is a plain (B, n) array; the directional passes use the true dynamics
    at x. With params given, the returned values are taped tensors and
    gradients flow to the watched network parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    f = system.f(x)
    g = system.g(x)
    m = g.shape[-1]
    if params is None and _is_array(x):
        V = cert(x)
    else:
        V = cert(as_tensor(x), params=params)
    dirs = [f] + [g[:, :, j] for j in range(m)]
    tangents = []
    for d in dirs:
        out = cert(Dual(as_tensor(x), as_tensor(d)), params=params)
        tangents.append(out.tangent)
    if params is None:
        LgV = np.stack([t.data for t in tangents[1:]], axis=-1)
        return V, tangents[0].data, LgV
    LfV = tangents[0]
    cols = [t.reshape((-1, 1)) for t in tangents[1:]]
    LgV = cols[0] if m == 1 else dual_concat(cols, axis=1)
    return V, LfV, LgV


def clf_residuals(cert, system, x, u, c=1.0, params=None):
    """(V, Vdot + c V) along given controls; one directional pass."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    xdot = system.xdot(x, u)
    if params is None:
        V = cert(x)
    else:
        V = cert(as_tensor(x), params=params)
    Vdot = cert(Dual(as_tensor(x), as_tensor(xdot)), params=params).tangent
    if params is None:
        return V, Vdot.data + c * V
    return V, Vdot + c * V


def cbf_residuals(cert, system, x, u, gamma=0.1, params=None):
    """(h, hdot + gamma h); nonpositive residual keeps h <= 0 invariant."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    xdot = system.xdot(x, u)
    if params is None:
        h = cert(x)
    else:
        h = cert(as_tensor(x), params=params)
    hdot = cert(Dual(as_tensor(x), as_tensor(xdot)), params=params).tangent
    if params is None:
        return h, hdot.data + gamma * h
    return h, hdot + gamma * h


def contraction_residuals(metric, system, x, u, jac_cl, lam=1.0, params=None):
    """(M, C) with C = Mdot + J'M + M J + 2 lam M, all (B, n, n).

    jac_cl is the closed-loop Jacobian at each sample, a plain (B, n, n)
    array; Mdot is the directional derivative of M along f + g u.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    xdot = system.xdot(x, u)
    J = np.asarray(jac_cl, dtype=np.float64)
    if params is None:
        M = metric.matrix(x)
        Md = metric.matrix(Dual(as_tensor(x), as_tensor(xdot))).tangent.data
        C = Md + np.swapaxes(J, -1, -2) @ M + M @ J + 2.0 * lam * M
        return M, C
    M = metric.matrix(as_tensor(x), params=params)
    Md = metric.matrix(Dual(as_tensor(x), as_tensor(xdot)), params=params).tangent
    Jt = as_tensor(np.ascontiguousarray(np.swapaxes(J, -1, -2)))
    C = Md + bmm(Jt, M) + bmm(M, as_tensor(J)) + 2.0 * lam * M
    return M, C
