"""Closed-loop simulation and rollout diagnostics.

Integration is classic RK4 at dt_sim with the control recomputed every
dt_ctrl and held in between (zero-order hold). Rollouts truncate, rather
than extrapolate, when the state leaves the training box: certificates mean
nothing out there, so the honest answer is a shorter trajectory with a
status flag.
"""

from dataclasses import dataclass, field

import numpy as np

from .certificates import clf_residuals
from .dynamics import wrap_angle


def rk4_step(xdot, x, dt):
    """One fourth-order Runge-Kutta step of a frozen-input vector field."""
    k1 = xdot(x)
    k2 = xdot(x + 0.5 * dt * k1)
    k3 = xdot(x + 0.5 * dt * k2)
    k4 = xdot(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    """One closed-loop rollout, sampled at the simulation rate.

    states has one more row than the number of integration steps taken;
    inputs[k] and relaxations[k] are the values applied over the step that
    starts at times[k] (the final row repeats them so CSV stays
    rectangular). monitor_flags[k] refers to the step ending at index k,
    so index 0 is always clear. status is "ok", "left_box", or
    "infeasible".
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    cert_values: np.ndarray
    relaxations: np.ndarray
    monitor_flags: np.ndarray
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        k = len(self.times)
        if not (len(self.states) == len(self.cert_values)
                == len(self.monitor_flags) == k
                and len(self.inputs) == len(self.relaxations) == k - 1):
            raise ValueError("trajectory field lengths are inconsistent")

    @property
    def steps(self):
        return len(self.inputs)

    def csv_rows(self):
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.steps else 0
        header = (["t"] + [f"x_{i}" for i in range(n)]
                  + [f"u_{j}" for j in range(m)]
                  + ["cert_value", "relaxation", "monitor_flag"])
        rows = [header]
        for k in range(len(self.times)):
            j = min(k, self.steps - 1)
            u = self.inputs[j] if self.steps else np.zeros(0)
            r = self.relaxations[j] if self.steps else 0.0
            rows.append([_fmt(self.times[k])]
                        + [_fmt(v) for v in self.states[k]]
                        + [_fmt(v) for v in u]
                        + [_fmt(self.cert_values[k]), _fmt(r),
                           str(int(self.monitor_flags[k]))])
        return rows

    def write_csv(self, path):
        with open(path, "w") as fh:
            for row in self.csv_rows():
                fh.write(",".join(row) + "\n")


def _fmt(v):
    return format(float(v), ".17g")


def _control_of(policy, x, t):
    """(u, relaxation, cert_value) regardless of how much the policy reports."""
    if getattr(policy, "time_varying", False):
        out = policy(x[None], t)
    elif hasattr(policy, "detail"):
        out = policy.detail(x[None])
    else:
        out = policy(x[None])
    if hasattr(out, "u"):
        return out.u[0], float(out.relaxation[0]), float(out.cert_value[0])
    return np.asarray(out, dtype=np.float64)[0], 0.0, np.nan


def _steps_per_tick(dt_sim, dt_ctrl):
    ratio = dt_ctrl / dt_sim
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError("dt_ctrl must be a positive integer multiple of dt_sim")
    return int(round(ratio))


def rollout(system, policy, x0, T, dt_sim=0.01, dt_ctrl=0.1,
            cert=None, monitor=None, wrap_dims=(), disturbance=None):
    """Integrate the closed loop from x0 for horizon T.

    cert, when given (or found as policy.cert), is evaluated at every
    recorded state; monitor, when given, sees each (t, cert_value) pair and
    its flags land in the trajectory. wrap_dims lists angle components to
    reduce to (-pi, pi] after each step; for a system whose dynamics are
    periodic in those coordinates this changes nothing but the recorded
    representative, which otherwise drifts out of the state box.
    disturbance(x, t), when given, is added to xdot inside the integrator
    (bounded additive noise for robustness studies).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if not system.in_box(x0)[0]:
        raise ValueError("initial state outside the state box")
    per_tick = _steps_per_tick(dt_sim, dt_ctrl)
    n_steps = int(round(T / dt_sim))
    if n_steps < 1:
        raise ValueError("horizon shorter than one step")
    cert = cert if cert is not None else getattr(policy, "cert", None)
    if monitor is not None and hasattr(monitor, "reset"):
        monitor.reset()

    def value_at(x, fallback):
        if cert is not None:
            return float(cert(x[None])[0])
        return fallback

    x = x0.copy()
    status = "ok"
    u = np.zeros(system.m)
    relax = 0.0
    times = [0.0]
    states = [x.copy()]
    inputs = []
    relaxations = []
    w0 = value_at(x, np.nan)
    cert_values = [w0]
    flags = [bool(monitor.check(0.0, w0)) if monitor is not None else False]
    for k in range(n_steps):
        t = k * dt_sim
        if k % per_tick == 0:
            try:
                u, relax, _ = _control_of(policy, x, t)
            except RuntimeError:
                status = "infeasible"
                break
        if disturbance is None:
            x_next = rk4_step(lambda s: system.xdot(s, u), x, dt_sim)
        else:
            x_next = rk4_step(lambda s: system.xdot(s, u) + disturbance(s, t),
                              x, dt_sim)
        for a in wrap_dims:
            x_next[a] = wrap_angle(x_next[a])
        if not system.in_box(x_next)[0]:
            status = "left_box"
            break
        x = x_next
        times.append((k + 1) * dt_sim)
        states.append(x.copy())
        inputs.append(np.asarray(u, dtype=np.float64).copy())
        relaxations.append(relax)
        w = value_at(x, np.nan)
        cert_values.append(w)
        flags.append(bool(monitor.check(times[-1], w)) if monitor is not None
                     else False)
    return Trajectory(
        times=np.asarray(times), states=np.asarray(states),
        inputs=np.asarray(inputs).reshape(len(inputs), system.m),
        cert_values=np.asarray(cert_values),
        relaxations=np.asarray(relaxations),
        monitor_flags=np.asarray(flags, dtype=bool), status=status)


# -- references and tracking ---------------------------------------------------


class ReferenceTrajectory:
    """Open-loop reference sampled on the simulation grid.

    states[k] is the reference state at k*dt; inputs[k] the (held) input
    over [k*dt, (k+1)*dt). Lookups clamp to the final sample, so a tracker
    running slightly past the end sees a constant goal.
    """

    def __init__(self, dt, states, inputs):
        self.dt = float(dt)
        self.states = np.asarray(states, dtype=np.float64)
        self.inputs = np.asarray(inputs, dtype=np.float64)
        if len(self.inputs) != len(self.states) - 1:
            raise ValueError("need exactly one input per step")

    @property
    def duration(self):
        return (len(self.states) - 1) * self.dt

    def _index(self, t):
        return min(int(round(t / self.dt)), len(self.states) - 1)

    def state_at(self, t):
        return self.states[self._index(t)]

    def input_at(self, t):
        return self.inputs[min(self._index(t), len(self.inputs) - 1)]


def open_loop_reference(system, input_fn, x0, T, dt_sim=0.01, dt_ctrl=0.1,
                        wrap_dims=()):
    """Integrate x0 under u(t) = input_fn(t) with zero-order hold."""
    per_tick = _steps_per_tick(dt_sim, dt_ctrl)
    n_steps = int(round(T / dt_sim))
    x = np.asarray(x0, dtype=np.float64).copy()
    states = [x.copy()]
    inputs = []
    u = None
    for k in range(n_steps):
        if k % per_tick == 0:
            u = np.asarray(input_fn(k * dt_sim), dtype=np.float64)
        x = rk4_step(lambda s: system.xdot(s, u), x, dt_sim)
        for a in wrap_dims:
            x[a] = wrap_angle(x[a])
        states.append(x.copy())
        inputs.append(u.copy())
    return ReferenceTrajectory(dt_sim, np.asarray(states), np.asarray(inputs))


def tracking_error(x, x_star, angular_dims=()):
    """x - x_star with angle components wrapped to (-pi, pi]."""
    e = np.asarray(x, dtype=np.float64) - np.asarray(x_star, dtype=np.float64)
    for a in angular_dims:
        e[..., a] = wrap_angle(e[..., a])
    return e


class TrackingPolicy:
    """Adapter feeding a reference into a tracking controller for rollout."""

    time_varying = True

    def __init__(self, controller, reference, angular_dims=()):
        self.controller = controller
        self.reference = reference
        self.angular_dims = tuple(angular_dims)

    def __call__(self, x, t):
        xs = self.reference.state_at(t)[None]
        us = self.reference.input_at(t)[None]
        e = tracking_error(x, xs, self.angular_dims)
        return self.controller(x, e, us)


# -- diagnostics ------------------------------------------------------------------


def fit_log_slope(times, values):
    """Least-squares slope of log(values) against time."""
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("values must be positive for a log-slope fit")
    y = np.log(v)
    tc = t - t.mean()
    return float((tc * (y - y.mean())).sum() / (tc * tc).sum())


def contraction_diagnostics(metric, traj, reference, angular_dims=()):
    """Decay-rate fit and overshoot of the metric distance along a rollout.

    Returns (slope, R) where slope is the fitted log-rate of
    e' M(x) e over the trajectory times and R = max sqrt(cond(M)).
    Raises when the metric value is not positive somewhere on the path (M
    is then not positive definite at that state, which the caller needs to
    know about, not average over).
    """
    xs = np.stack([reference.state_at(t) for t in traj.times])
    e = tracking_error(traj.states, xs, angular_dims)
    M = metric(traj.states)
    vals = np.einsum("bi,bij,bj->b", e, M, e)
    if np.any(vals <= 0):
        raise ValueError("metric value not positive along the path")
    eig = np.linalg.eigvalsh(M)
    if eig.min() <= 0:
        raise ValueError("metric not positive definite along the path")
    R = float(np.sqrt((eig[:, -1] / eig[:, 0]).max()))
    return fit_log_slope(traj.times, vals), R


@dataclass
class RoaEstimate:
    level: float          # largest violation-free sublevel value found
    fraction: float       # share of sampled states certified by that level
    violations: int
    samples: int


def roa_estimate(system, policy, cert, n_samples=5000, seed=0, c=1.0,
                 tol=1e-3):
    """Sampled region-of-attraction statistics for a Lyapunov-type pair.

    Draws states uniformly from the box, checks the exact decrease residual
    under the policy's control, and reports the largest level whose sublevel
    set contains no violating sample.
    """
    if n_samples <= 0:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    lo, hi = system.x_box[:, 0], system.x_box[:, 1]
    xs = lo + rng.random((n_samples, system.n)) * (hi - lo)
    out = policy.detail(xs) if hasattr(policy, "detail") else None
    u = out.u if out is not None else np.asarray(policy(xs), dtype=np.float64)
    V, res = clf_residuals(cert, system, xs, u, c=c)
    viol = res > tol
    if viol.any():
        level = max(float(V[viol].min()), 0.0)
    else:
        level = float(V.max())
    certified = (V < level) & ~viol if viol.any() else (V <= level)
    return RoaEstimate(level=level, fraction=float(certified.mean()),
                       violations=int(viol.sum()), samples=n_samples)
