"""Control policies: linear feedback, certificate-filtered QP controllers,
and tracking correctors.

The QP policies minimize the deviation from a nominal control subject to
the certificate decrease condition, relaxed through the penalty machinery
of RelaxedQpController. Actuator boxes enter as hard rows, so the returned
control always respects the limits; infeasibility pressure shows up in the
relaxation value instead, which is exactly the quantity the training losses
and the runtime monitor watch.
"""

from dataclasses import dataclass

import numpy as np

from ..certificates import lie_derivatives
from ..diff.dual import Dual
from ..diff.dual import concat as dual_concat
from ..diff.mlp import forward
from ..diff.tensor import as_tensor, concat
from .qp import RelaxedQpController


def box_rows(u_max, m):
    """Hard rows for |u_i| <= u_max_i."""
    u_max = np.broadcast_to(np.asarray(u_max, dtype=np.float64), (m,))
    if np.any(u_max <= 0):
        raise ValueError("control limits must be positive")
    A = np.vstack([np.eye(m), -np.eye(m)])
    b = np.concatenate([u_max, u_max])
    return A, b


@dataclass
class ControlOutput:
    """One batched control evaluation with its certificate bookkeeping."""

    u: np.ndarray            # (B, m)
    relaxation: np.ndarray   # (B,) total constraint relaxation
    cert_value: np.ndarray   # (B,) V or h at the state


class LinearStateFeedback:
    """u = u_eq - K (x - goal), optionally saturated at the actuator box."""

    def __init__(self, K, goal=None, u_eq=None, u_max=None):
        self.K = np.atleast_2d(np.asarray(K, dtype=np.float64))
        m, n = self.K.shape
        self.goal = np.zeros(n) if goal is None else np.asarray(goal, float)
        self.u_eq = np.zeros(m) if u_eq is None else np.asarray(u_eq, float)
        self.u_max = None if u_max is None else np.broadcast_to(
            np.asarray(u_max, dtype=np.float64), (m,))

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = self.u_eq - (x - self.goal) @ self.K.T
        if self.u_max is not None:
            u = np.clip(u, -self.u_max, self.u_max)
        return u

    def jacobian(self, x):
        """du/dx away from saturation."""
        B = np.atleast_2d(np.asarray(x)).shape[0]
        return np.broadcast_to(-self.K, (B,) + self.K.shape).copy()


def _nominal(u_nom, x, m):
    if u_nom is None:
        return np.zeros((x.shape[0], m))
    if callable(u_nom):
        return np.asarray(u_nom(x), dtype=np.float64)
    return np.broadcast_to(np.asarray(u_nom, dtype=np.float64),
                           (x.shape[0], m))


class ClfQpPolicy:
    """min |u - u_nom|^2 + w * pen(r)  s.t.  LfV + LgV u + c V <= r, |u| box."""

    def __init__(self, cert, system, c=1.0, relax_weight=1e3,
                 penalty="linear", u_max=None, u_nom=None):
        self.cert = cert
        self.system = system
        self.c = float(c)
        self.u_nom = u_nom
        self.m = system.m
        hard_A, hard_b = (None, None) if u_max is None else box_rows(u_max, self.m)
        self.controller = RelaxedQpController(
            2.0 * np.eye(self.m), [relax_weight], penalty=penalty,
            hard_A=hard_A, hard_b=hard_b)

    def _rows(self, x, params=None):
        V, LfV, LgV = lie_derivatives(self.cert, self.system, x, params=params)
        if params is None:
            A = LgV[:, None, :]
            b = (-self.c * V - LfV)[:, None]
            return V, A, b
        B = x.shape[0]
        A = LgV.reshape((B, 1, self.m))
        b = (-self.c * V - LfV).reshape((B, 1))
        return V, A, b

    def detail(self, x):
        x = np.asarray(x, dtype=np.float64)
        V, A, b = self._rows(x)
        q = -2.0 * _nominal(self.u_nom, x, self.m)
        sol = self.controller.solve_batch(q, A, b)
        return ControlOutput(u=sol.u, relaxation=sol.relaxation.sum(axis=-1),
                             cert_value=V)

    def __call__(self, x):
        return self.detail(np.atleast_2d(np.asarray(x, dtype=np.float64))).u

    def layer(self, x, params):
        """Taped (u, relaxation, V) for training; x is a plain array."""
        x = np.asarray(x, dtype=np.float64)
        V, A, b = self._rows(x, params=params)
        q = -2.0 * _nominal(self.u_nom, x, self.m)
        u, r = self.controller.layer(q, A, b)
        return u, r[:, 0], V


class CbfQpPolicy:
    """Safety filter: stay close to u_nom while hdot + gamma h <= r."""

    def __init__(self, cert, system, gamma=0.1, relax_weight=1e4,
                 penalty="linear", u_max=None, u_nom=None):
        self.cert = cert
        self.system = system
        self.gamma = float(gamma)
        self.u_nom = u_nom
        self.m = system.m
        hard_A, hard_b = (None, None) if u_max is None else box_rows(u_max, self.m)
        self.controller = RelaxedQpController(
            2.0 * np.eye(self.m), [relax_weight], penalty=penalty,
            hard_A=hard_A, hard_b=hard_b)

    def _rows(self, x, params=None):
        h, Lfh, Lgh = lie_derivatives(self.cert, self.system, x, params=params)
        if params is None:
            A = Lgh[:, None, :]
            b = (-self.gamma * h - Lfh)[:, None]
            return h, A, b
        B = x.shape[0]
        A = Lgh.reshape((B, 1, self.m))
        b = (-self.gamma * h - Lfh).reshape((B, 1))
        return h, A, b

    def detail(self, x):
        x = np.asarray(x, dtype=np.float64)
        h, A, b = self._rows(x)
        q = -2.0 * _nominal(self.u_nom, x, self.m)
        sol = self.controller.solve_batch(q, A, b)
        return ControlOutput(u=sol.u, relaxation=sol.relaxation.sum(axis=-1),
                             cert_value=h)

    def __call__(self, x):
        return self.detail(np.atleast_2d(np.asarray(x, dtype=np.float64))).u

    def layer(self, x, params):
        x = np.asarray(x, dtype=np.float64)
        h, A, b = self._rows(x, params=params)
        q = -2.0 * _nominal(self.u_nom, x, self.m)
        u, r = self.controller.layer(q, A, b)
        return u, r[:, 0], h


class ClfCbfQpPolicy:
    """Both conditions at once; the barrier row carries the heavier weight
    so safety wins when stabilization and safety conflict."""

    def __init__(self, clf_cert, cbf_cert, system, c=1.0, gamma=0.1,
                 clf_weight=1e2, cbf_weight=1e4, penalty="linear",
                 u_max=None, u_nom=None):
        self.clf_cert = clf_cert
        self.cbf_cert = cbf_cert
        self.system = system
        self.c = float(c)
        self.gamma = float(gamma)
        self.u_nom = u_nom
        self.m = system.m
        hard_A, hard_b = (None, None) if u_max is None else box_rows(u_max, self.m)
        self.controller = RelaxedQpController(
            2.0 * np.eye(self.m), [clf_weight, cbf_weight], penalty=penalty,
            hard_A=hard_A, hard_b=hard_b)

    def detail(self, x):
        x = np.asarray(x, dtype=np.float64)
        V, LfV, LgV = lie_derivatives(self.clf_cert, self.system, x)
        h, Lfh, Lgh = lie_derivatives(self.cbf_cert, self.system, x)
        A = np.stack([LgV, Lgh], axis=1)
        b = np.stack([-self.c * V - LfV, -self.gamma * h - Lfh], axis=1)
        q = -2.0 * _nominal(self.u_nom, x, self.m)
        sol = self.controller.solve_batch(q, A, b)
        return ControlOutput(u=sol.u, relaxation=sol.relaxation.sum(axis=-1),
                             cert_value=V)

    def __call__(self, x):
        return self.detail(np.atleast_2d(np.asarray(x, dtype=np.float64))).u


class TrackingController:
    """u = u_ref + pi(x, e) - pi(x, 0), exactly the reference input at zero
    tracking error. The network sees the current state (through the feature
    map, so angles wrap) next to the error."""

    def __init__(self, net, features, state_dim):
        self.net = net
        self.features = features
        self.state_dim = int(state_dim)
        if net.in_dim != features.out_dim + self.state_dim:
            raise ValueError("network input width must be feature dim + state dim")
        self.m = net.widths[-1]

    def correction(self, x, e, params=None):
        """pi(x, e) - pi(x, 0), batched; taped when params are watched."""
        fx = self.features(x)
        B = np.asarray(x).shape[0]
        zeros = np.zeros((B, self.state_dim))
        if isinstance(e, np.ndarray) and params is None:
            z = np.concatenate([fx, e], axis=-1)
            z0 = np.concatenate([fx, zeros], axis=-1)
            return forward(self.net, z) - forward(self.net, z0)
        fx_t = as_tensor(fx)
        e_t = as_tensor(e) if isinstance(e, np.ndarray) else e
        z = dual_concat([fx_t, e_t], axis=1)
        z0 = dual_concat([fx_t, as_tensor(zeros)], axis=1)
        return self.net.apply(z, params) - self.net.apply(z0, params)

    def __call__(self, x, e, u_ref):
        u_ref = np.asarray(u_ref, dtype=np.float64)
        return u_ref + self.correction(np.asarray(x, dtype=np.float64),
                                       np.asarray(e, dtype=np.float64))

    def error_jacobian(self, x, e, params=None):
        """d(correction)/de, (B, m, n); one directional pass per error axis."""
        x = np.asarray(x, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        cols = []
        for i in range(self.state_dim):
            t = np.zeros_like(e)
            t[:, i] = 1.0
            d = self.correction(x, Dual(as_tensor(e), as_tensor(t)), params=params)
            cols.append(d.tangent)
        if params is None:
            return np.stack([c.data for c in cols], axis=-1)
        B = e.shape[0]
        return concat([c.reshape((B, self.m, 1)) for c in cols], axis=2)
