"""Control-affine systems dx/dt = f(x) + g(x) u.

Each factory returns an immutable ControlAffineSystem whose f and g accept
plain ndarrays, tape Tensors, or Duals (batch-first, shape (B, n)), so the
same dynamics code serves simulation, training-time autodiff, and the
finite-difference oracles in the tests. Interval evaluators for the verifier
and documented Lipschitz/bound constants over the state box ride along.
"""

import numpy as np

from .diff.dual import Dual, concat
from .diff.tensor import Tensor, as_tensor
from .verification import interval as iv


def _is_array(x):
    return isinstance(x, np.ndarray)


def _batch(x):
    """Normalize to (B, n); returns (value, was_single)."""
    if _is_array(x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return x[None], True
    return x, False


def _unwrap(out, x_in, single):
    if _is_array(x_in) and isinstance(out, Tensor):
        out = out.data
    if single and _is_array(out):
        return out[0]
    return out


def _nrows(x):
    return x.shape[0]


class ControlAffineSystem:
    """Immutable bundle of dynamics, bounds, goal, and labeled-region structure.

    Attributes
    ----------
    n, m : state and input dimensions
    f, g : drift (B,n)->(B,n) and actuation (B,n)->(B,n,m)
    jac_f, jac_g : analytic Jacobians w.r.t. x, shapes (B,n,n) and (B,n,m,n)
    x_box : (n, 2) state hyperrectangle
    u_box : (m, 2) input box or None (unbounded)
    goal : goal state inside x_box
    angular_dims : state indices fed to networks as (sin, cos) pairs
    safe_mask, unsafe_mask : predicates (B,n)->bool array, or None
    f_interval, g_interval : interval evaluators over a state box
    f_bound, f_lip, g_bound, g_lip : documented constants over x_box
    """

    def __init__(self, name, n, m, f, g, jac_f, jac_g, x_box, goal,
                 u_box=None, angular_dims=(), safe_mask=None, unsafe_mask=None,
                 f_interval=None, g_interval=None,
                 f_bound=0.0, f_lip=0.0, g_bound=0.0, g_lip=0.0, params=None):
        self.name = name
        self.n = int(n)
        self.m = int(m)
        self._f = f
        self._g = g
        self.jac_f = jac_f
        self.jac_g = jac_g
        self.x_box = np.asarray(x_box, dtype=np.float64).reshape(n, 2)
        self.u_box = None if u_box is None else np.asarray(u_box, dtype=np.float64).reshape(m, 2)
        self.goal = np.asarray(goal, dtype=np.float64).reshape(n)
        self.angular_dims = tuple(int(i) for i in angular_dims)
        self.safe_mask = safe_mask
        self.unsafe_mask = unsafe_mask
        self.f_interval = f_interval
        self.g_interval = g_interval
        self.f_bound = float(f_bound)
        self.f_lip = float(f_lip)
        self.g_bound = float(g_bound)
        self.g_lip = float(g_lip)
        self.params = dict(params or {})
        if np.any(self.goal < self.x_box[:, 0]) or np.any(self.goal > self.x_box[:, 1]):
            raise ValueError("goal outside the state box")

    def f(self, x):
        xb, single = _batch(x)
        return _unwrap(self._f(xb), x, single)

    def g(self, x):
        xb, single = _batch(x)
        return _unwrap(self._g(xb), x, single)

    def xdot(self, x, u):
        """f(x) + g(x) u for plain arrays; u is (B, m) or (m,)."""
        xb, single = _batch(x)
        u = np.asarray(u, dtype=np.float64)
        ub = u[None] if u.ndim == 1 else u
        out = self.f(xb) + np.matmul(self.g(xb), ub[..., None])[..., 0]
        return out[0] if single else out

    def in_box(self, x):
        xb, _ = _batch(x)
        return np.all((xb >= self.x_box[:, 0]) & (xb <= self.x_box[:, 1]), axis=1)

    def __repr__(self):
        return f"ControlAffineSystem({self.name}, n={self.n}, m={self.m})"


# -- inverted pendulum (SIV.C style toy) ---------------------------------------


def pendulum(mass=1.0, length=1.0, damping=0.01, gravity=9.81,
             theta_max=2.0 * np.pi, omega_max=4.0, torque_max=None):
    """Inverted pendulum: x = [theta, theta_dot], u = [torque].

    theta = 0 is upright (the unstable equilibrium, which is the goal).
    """
    if mass <= 0 or length <= 0:
        raise ValueError("mass and length must be positive")
    if gravity <= 0:
        raise ValueError("gravity must be positive")
    k_g = gravity / length
    k_b = damping / (mass * length * length)
    k_u = 1.0 / (mass * length * length)

    def f(x):
        theta = x[:, 0:1]
        omega = x[:, 1:2]
        if _is_array(x):
            return np.concatenate([omega, k_g * np.sin(theta) - k_b * omega], axis=1)
        return concat([omega, k_g * theta.sin() - k_b * omega], axis=1)

    g_col = np.array([[0.0], [k_u]])

    def g(x):
        return np.broadcast_to(g_col, (_nrows(x), 2, 1))

    def jac_f(x):
        B = len(x)
        J = np.zeros((B, 2, 2))
        J[:, 0, 1] = 1.0
        J[:, 1, 0] = k_g * np.cos(x[:, 0])
        J[:, 1, 1] = -k_b
        return J

    def jac_g(x):
        return np.zeros((len(x), 2, 1, 2))

    def f_interval(lo, hi):
        s = iv.isin((lo[..., 0], hi[..., 0]))
        w = (lo[..., 1], hi[..., 1])
        r2 = iv.isub(iv.iscale(k_g, s), iv.iscale(k_b, w))
        return (np.stack([w[0], r2[0]], axis=-1),
                np.stack([w[1], r2[1]], axis=-1))

    def g_interval(lo, hi):
        shape = lo.shape[:-1] + (2, 1)
        gl = np.broadcast_to(g_col, shape)
        return gl, gl

    x_box = [[-theta_max, theta_max], [-omega_max, omega_max]]
    u_box = None if torque_max is None else [[-torque_max, torque_max]]
    return ControlAffineSystem(
        "pendulum", 2, 1, f, g, jac_f, jac_g, x_box, goal=[0.0, 0.0],
        u_box=u_box, angular_dims=(0,),
        f_interval=f_interval, g_interval=g_interval,
        f_bound=float(np.hypot(omega_max, k_g + k_b * omega_max)),
        f_lip=float(np.linalg.norm([[0.0, 1.0], [k_g, k_b]], 2)),
        g_bound=k_u, g_lip=0.0,
        params={"mass": mass, "length": length, "damping": damping,
                "gravity": gravity, "theta_max": theta_max,
                "omega_max": omega_max, "torque_max": torque_max})


def pendulum_linearization(sys):
    """(A, B) of the pendulum at the upright goal, for LQR pretraining."""
    p = sys.params
    k_g = p["gravity"] / p["length"]
    k_b = p["damping"] / (p["mass"] * p["length"] ** 2)
    k_u = 1.0 / (p["mass"] * p["length"] ** 2)
    A = np.array([[0.0, 1.0], [k_g, -k_b]])
    B = np.array([[0.0], [k_u]])
    return A, B


# -- CWH satellite rendezvous (SIV.D) -------------------------------------------


def cwh_matrices(mean_motion, mass):
    n = mean_motion
    A = np.zeros((6, 6))
    A[0, 3] = A[1, 4] = A[2, 5] = 1.0
    A[3, 0] = 3.0 * n * n
    A[3, 4] = 2.0 * n
    A[4, 3] = -2.0 * n
    A[5, 2] = -n * n
    B = np.zeros((6, 3))
    B[3, 0] = B[4, 1] = B[5, 2] = 1.0 / mass
    return A, B


def cwh_satellite(mass=1.0, mean_motion=1e-3,
                  pos_max=2.0, vel_max=1.0,
                  r_unsafe_inner=0.25, r_unsafe_outer=1.5,
                  r_safe_inner=0.30, r_safe_outer=1.45):
    """Satellite rendezvous in the rotating CWH frame.

    x = [p_x, p_y, p_z, v_x, v_y, v_z], u = thrust force. Station-keeping:
    radii in [r_safe_inner, r_safe_outer] are labeled safe, radii outside
    [r_unsafe_inner, r_unsafe_outer] unsafe; the thin bands between carry no
    label so the barrier's zero level set has room to sit between them.
    """
    if mass <= 0 or mean_motion <= 0:
        raise ValueError("mass and mean_motion must be positive")
    A, Bm = cwh_matrices(mean_motion, mass)
    At = A.T.copy()

    def f(x):
        return x @ At

    def g(x):
        return np.broadcast_to(Bm, (_nrows(x), 6, 3))

    def jac_f(x):
        return np.broadcast_to(A, (len(x), 6, 6)).copy()

    def jac_g(x):
        return np.zeros((len(x), 6, 3, 6))

    def radius(x):
        return np.sqrt(np.sum(x[:, :3] ** 2, axis=1))

    def safe_mask(x):
        r = radius(np.asarray(x, dtype=np.float64))
        return (r >= r_safe_inner) & (r <= r_safe_outer)

    def unsafe_mask(x):
        r = radius(np.asarray(x, dtype=np.float64))
        return (r < r_unsafe_inner) | (r > r_unsafe_outer)

    def f_interval(lo, hi):
        return iv.iaffine((lo, hi), At)

    def g_interval(lo, hi):
        shape = lo.shape[:-1] + (6, 3)
        gl = np.broadcast_to(Bm, shape)
        return gl, gl

    x_box = [[-pos_max, pos_max]] * 3 + [[-vel_max, vel_max]] * 3
    xmax = np.sqrt(3 * pos_max ** 2 + 3 * vel_max ** 2)
    return ControlAffineSystem(
        "cwh_satellite", 6, 3, f, g, jac_f, jac_g, x_box,
        goal=[0.0] * 6,
        safe_mask=safe_mask, unsafe_mask=unsafe_mask,
        f_interval=f_interval, g_interval=g_interval,
        f_bound=float(np.linalg.norm(A, 2) * xmax),
        f_lip=float(np.linalg.norm(A, 2)),
        g_bound=1.0 / mass, g_lip=0.0,
        params={"mass": mass, "mean_motion": mean_motion,
                "pos_max": pos_max, "vel_max": vel_max,
                "r_unsafe_inner": r_unsafe_inner, "r_unsafe_outer": r_unsafe_outer,
                "r_safe_inner": r_safe_inner, "r_safe_outer": r_safe_outer})


# -- kinematic car (SIV.E) --------------------------------------------------------


def kinematic_car(pos_max=2.0):
    """Drift-free unicycle: x = [p_x, p_y, theta], u = [v, omega]."""

    def f(x):
        z = np.zeros((_nrows(x), 3))
        if _is_array(x):
            return z
        if isinstance(x, Dual):
            return Dual(as_tensor(z), as_tensor(np.zeros_like(z)))
        return as_tensor(z)

    def g(x):
        B = _nrows(x)
        if _is_array(x):
            out = np.zeros((B, 3, 2))
            out[:, 0, 0] = np.cos(x[:, 2])
            out[:, 1, 0] = np.sin(x[:, 2])
            out[:, 2, 1] = 1.0
            return out
        th = x[:, 2:3]
        zero = np.zeros((B, 1))
        one = np.ones((B, 1))
        flat = concat([th.cos(), zero, th.sin(), zero, zero, one], axis=1)
        return flat.reshape(B, 3, 2)

    def jac_f(x):
        return np.zeros((len(x), 3, 3))

    def jac_g(x):
        J = np.zeros((len(x), 3, 2, 3))
        J[:, 0, 0, 2] = -np.sin(x[:, 2])
        J[:, 1, 0, 2] = np.cos(x[:, 2])
        return J

    def f_interval(lo, hi):
        z = np.zeros_like(lo)
        return z, z.copy()

    def g_interval(lo, hi):
        th = (lo[..., 2], hi[..., 2])
        c = iv.icos(th)
        s = iv.isin(th)
        shape = lo.shape[:-1] + (3, 2)
        gl = np.zeros(shape)
        gh = np.zeros(shape)
        gl[..., 0, 0], gh[..., 0, 0] = c
        gl[..., 1, 0], gh[..., 1, 0] = s
        gl[..., 2, 1] = gh[..., 2, 1] = 1.0
        return gl, gh

    x_box = [[-pos_max, pos_max], [-pos_max, pos_max], [-np.pi, np.pi]]
    return ControlAffineSystem(
        "kinematic_car", 3, 2, f, g, jac_f, jac_g, x_box,
        goal=[0.0, 0.0, 0.0], angular_dims=(2,),
        f_interval=f_interval, g_interval=g_interval,
        f_bound=0.0, f_lip=0.0, g_bound=np.sqrt(2.0), g_lip=1.0,
        params={"pos_max": pos_max})


class TrackingErrorView:
    """Error-state view of a system tracking a sampled reference.

    Wraps (system, reference) and exposes the error e = x - x*(t) together
    with the error dynamics; the reference is sample-and-hold like the
    simulator's control signal.
    """

    def __init__(self, system, reference):
        self.system = system
        self.ref = reference

    def error(self, x, t):
        x_star, _ = self.ref.at(t)
        e = np.asarray(x, dtype=np.float64) - x_star
        for i in self.system.angular_dims:
            e[..., i] = wrap_angle(e[..., i])
        return e

    def error_dynamics(self, e, t, u):
        x_star, u_star = self.ref.at(t)
        x = np.asarray(e, dtype=np.float64) + x_star
        xdot_star = self.system.xdot(x_star, u_star)
        return self.system.xdot(x, u) - xdot_star


def tracking_error_variant(system, reference):
    return TrackingErrorView(system, reference)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# -- stable linear benchmark -------------------------------------------------------


def is_hurwitz(A):
    return bool(np.all(np.linalg.eigvals(A).real < 0.0))


def lyapunov_solution(A, Q):
    """P solving A'P + PA = -Q for Hurwitz A and symmetric positive definite Q.

    Small dense Kronecker solve; the residual is checked to 1e-8 before
    returning, so a bad conditioning surprise fails loudly.
    """
    A = np.asarray(A, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ValueError("square matrices required")
    if np.max(np.abs(Q - Q.T)) > 1e-10 or np.any(np.linalg.eigvalsh(Q) <= 0):
        raise ValueError("Q must be symmetric positive definite")
    if not is_hurwitz(A):
        raise ValueError("A is not Hurwitz; no Lyapunov solution exists")
    K = np.kron(np.eye(n), A.T) + np.kron(A.T, np.eye(n))
    P = np.linalg.solve(K, -Q.reshape(-1)).reshape(n, n)
    P = 0.5 * (P + P.T)
    resid = np.max(np.abs(A.T @ P + P @ A + Q))
    if resid > 1e-8:
        raise ArithmeticError(f"Lyapunov residual {resid:.3e} exceeds 1e-8")
    return P


def stable_linear_benchmark(A, B, box_half_width=1.0):
    """Linear system dx/dt = Ax + Bu with Hurwitz A, on a symmetric box."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if not is_hurwitz(A):
        raise ValueError("A is not Hurwitz")
    n, m = B.shape
    At = A.T.copy()

    def f(x):
        return x @ At

    def g(x):
        return np.broadcast_to(B, (_nrows(x), n, m))

    def jac_f(x):
        return np.broadcast_to(A, (len(x), n, n)).copy()

    def jac_g(x):
        return np.zeros((len(x), n, m, n))

    def f_interval(lo, hi):
        return iv.iaffine((lo, hi), At)

    def g_interval(lo, hi):
        shape = lo.shape[:-1] + (n, m)
        gl = np.broadcast_to(B, shape)
        return gl, gl

    x_box = [[-box_half_width, box_half_width]] * n
    xmax = np.sqrt(n) * box_half_width
    return ControlAffineSystem(
        "stable_linear", n, m, f, g, jac_f, jac_g, x_box, goal=[0.0] * n,
        f_interval=f_interval, g_interval=g_interval,
        f_bound=float(np.linalg.norm(A, 2) * xmax),
        f_lip=float(np.linalg.norm(A, 2)),
        g_bound=float(np.linalg.norm(B, 2)), g_lip=0.0,
        params={"A": A.tolist(), "B": B.tolist(), "box_half_width": box_half_width})


class ScenarioSet:
    """Parameter variants of one system sharing dimensions and boxes."""

    def __init__(self, systems):
        systems = list(systems)
        if not systems:
            raise ValueError("scenario set must be non-empty")
        base = systems[0]
        for s in systems[1:]:
            if (s.n, s.m) != (base.n, base.m):
                raise ValueError("scenario dimensions differ")
            if not np.array_equal(s.x_box, base.x_box):
                raise ValueError("scenario state boxes differ")
        self.systems = systems

    def __iter__(self):
        return iter(self.systems)

    def __len__(self):
        return len(self.systems)
