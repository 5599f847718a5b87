"""Dataset sampling, the optimizer, and the three example training pipelines.

Each pipeline is fully determined by (config, seed): randomness flows from
one SeedSequence into named substreams, batches are visited in a seeded
shuffle order, and the QP layers and eigenvalue hinges are deterministic,
so rerunning a config reproduces the trained parameters bit for bit.
"""

import time

import numpy as np
from scipy.linalg import solve_continuous_are

from .certificates import (
    CertificateSpec,
    FeatureMap,
    MetricCertificate,
    NormSquaredCertificate,
    ScalarCertificate,
    cbf_condition_set,
    clf_condition_set,
    contraction_condition_set,
    loss_terms,
)
from .controllers.policies import (
    CbfQpPolicy,
    ClfQpPolicy,
    LinearStateFeedback,
    TrackingController,
)
from .diff.mlp import Mlp
from .diff.tensor import Tape, as_tensor
from .dynamics import (
    ScenarioSet,
    cwh_matrices,
    cwh_satellite,
    kinematic_car,
    lyapunov_solution,
    pendulum,
    pendulum_linearization,
    wrap_angle,
)
from .sim import open_loop_reference, rk4_step, tracking_error


def sample_uniform(box, count, rng):
    """Uniform draws from a hyperrectangle given as an (n, 2) bound array."""
    box = np.asarray(box, dtype=np.float64).reshape(-1, 2)
    if count <= 0:
        raise ValueError("sample count must be positive")
    lo, hi = box[:, 0], box[:, 1]
    if np.any(hi <= lo):
        raise ValueError("degenerate box: every dimension needs positive width")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return lo + rng.random((int(count), box.shape[0])) * (hi - lo)


# -- optimizer ------------------------------------------------------------------


class AdamState:
    """Moment buffers matching one flat list of parameter arrays."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; raises on non-finite gradients."""
    if len(params) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ArithmeticError("non-finite gradient; aborting this epoch")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# -- data -----------------------------------------------------------------------


class Dataset:
    """Base training states plus a bounded FIFO of verifier counterexamples.

    The cap bounds the total row count; when exceeded, the oldest
    counterexamples are evicted first (base rows are never dropped). Each
    counterexample remembers which condition it violated.
    """

    def __init__(self, states, cap=None):
        self.base = np.asarray(states, dtype=np.float64)
        if self.base.ndim != 2:
            raise ValueError("states must be a (N, n) array")
        self.cap = None if cap is None else int(cap)
        if self.cap is not None and self.cap < len(self.base):
            raise ValueError("cap smaller than the base dataset")
        self.cex_states = np.zeros((0, self.base.shape[1]))
        self.cex_conditions = []

    def __len__(self):
        return len(self.base) + len(self.cex_states)

    @property
    def states(self):
        if not len(self.cex_states):
            return self.base
        return np.concatenate([self.base, self.cex_states], axis=0)


def augment_with_counterexamples(dataset, report, duplication=10):
    """Append the report's counterexamples, oldest-first eviction at the cap."""
    if duplication <= 0:
        raise ValueError("duplication factor must be positive")
    rows = []
    names = []
    for cex in getattr(report, "counterexamples", []):
        state = np.asarray(cex.state, dtype=np.float64)
        for _ in range(int(duplication)):
            rows.append(state)
            names.append(cex.condition)
    if rows:
        dataset.cex_states = np.concatenate(
            [dataset.cex_states, np.stack(rows)], axis=0)
        dataset.cex_conditions.extend(names)
    if dataset.cap is not None:
        drop = len(dataset) - dataset.cap
        if drop > 0:
            dataset.cex_states = dataset.cex_states[drop:]
            dataset.cex_conditions = dataset.cex_conditions[drop:]
    return dataset


# -- configuration ----------------------------------------------------------------


class TrainConfig:
    """Knobs shared by the pipelines; unused fields are ignored per pipeline.

    weights maps condition names to penalty coefficients and overrides the
    pipeline defaults wholesale when given. epochs counts total passes,
    pretrain_epochs of which (CLF only) imitate the LQR quadratic before
    the certificate loss takes over.
    """

    def __init__(self, n_samples=10000, batch_size=256, epochs=25, lr=1e-3,
                 beta1=0.9, beta2=0.999, eps=1e-8, weights=None,
                 qp_relax_weight=None, rate=None, dt=0.01, seed=0,
                 pretrain_epochs=11, hidden=(64, 64), out_dim=8,
                 u_max=None, penalty="linear", cex_cap=None,
                 n_trajectories=100, horizon=10.0, dt_sim=0.01, dt_ctrl=0.1,
                 noise=0.01, gains=(1.0, 4.0, 3.0),
                 m_lo=0.1, m_hi=10.0, eps_nd=0.01):
        if n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if batch_size <= 0 or epochs < 0 or lr <= 0 or dt <= 0:
            raise ValueError("bad optimizer settings")
        if pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be nonnegative")
        self.n_samples = int(n_samples)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weights = None if weights is None else dict(weights)
        self.qp_relax_weight = qp_relax_weight
        self.rate = rate
        self.dt = float(dt)
        self.seed = int(seed)
        self.pretrain_epochs = int(pretrain_epochs)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = int(out_dim)
        self.u_max = u_max
        self.penalty = penalty
        self.cex_cap = cex_cap
        self.n_trajectories = int(n_trajectories)
        self.horizon = float(horizon)
        self.dt_sim = float(dt_sim)
        self.dt_ctrl = float(dt_ctrl)
        self.noise = float(noise)
        self.gains = tuple(float(g) for g in gains)
        self.m_lo = float(m_lo)
        self.m_hi = float(m_hi)
        self.eps_nd = float(eps_nd)

    def replace(self, **overrides):
        """A copy with some fields changed, revalidated by the constructor."""
        fields = dict(self.__dict__)
        fields.update(overrides)
        return TrainConfig(**fields)


def _substreams(seed, count):
    return [np.random.default_rng(s)
            for s in np.random.SeedSequence(seed).spawn(count)]


def _batches(order, batch_size):
    for k in range(0, len(order), batch_size):
        yield order[k:k + batch_size]


def _finite_or_raise(value, epoch):
    if not np.isfinite(value):
        raise ArithmeticError(f"loss diverged at epoch {epoch}")


def write_history(path, history):
    """History CSV: epoch, total_loss, one column per condition, wall_ms."""
    if not history:
        raise ValueError("empty history")
    names = [k for k in history[0] if k not in ("epoch", "total_loss", "wall_ms")]
    with open(path, "w") as fh:
        fh.write(",".join(["epoch", "total_loss"] + names + ["wall_ms"]) + "\n")
        for row in history:
            cells = [str(row["epoch"]), format(row["total_loss"], ".17g")]
            cells += [format(row.get(n, 0.0), ".17g") for n in names]
            cells.append(format(row["wall_ms"], ".10g"))
            fh.write(",".join(cells) + "\n")


# -- CLF on the pendulum -----------------------------------------------------------


PENDULUM_WEIGHTS = {"goal": 10.0, "positivity": 0.0, "relax": 1e3,
                    "decrease": 1.0, "decrease_fd": 1.0}


def lqr_quadratic(A, B):
    """(P, K) with V_lin = 0.5 x'Px for the LQR-closed linear system."""
    Pc = solve_continuous_are(A, B, np.eye(A.shape[0]), np.eye(B.shape[1]))
    K = B.T @ Pc
    P = lyapunov_solution(A - B @ K, np.eye(A.shape[0]))
    return P, K


def train_clf_pendulum(config, system=None, dataset=None, spec=None):
    """The pendulum CLF recipe.

    The first pretrain_epochs imitate the LQR quadratic 0.5 x'Px; without
    that shaping the loss has a trivial global minimum at V identically
    zero (every hinge vanishes and the QP relaxes nothing), and training
    reliably finds it. system may be a ScenarioSet, in which case every
    decrease-type residual is evaluated per scenario with equal weight.
    """
    systems = list(system) if isinstance(system, ScenarioSet) else None
    if systems is None:
        systems = [system if system is not None else pendulum()]
    base = systems[0]
    weights = dict(PENDULUM_WEIGHTS if config.weights is None else config.weights)
    rate = 1.0 if config.rate is None else float(config.rate)
    qp_w = 1e2 if config.qp_relax_weight is None else float(config.qp_relax_weight)
    r_sample, r_init, r_shuffle = _substreams(config.seed, 3)
    if dataset is None:
        dataset = Dataset(sample_uniform(base.x_box, config.n_samples, r_sample),
                          cap=config.cex_cap)
    if spec is None:
        net = Mlp((base.n, *config.hidden, config.out_dim), "tanh", rng=r_init)
        cert = NormSquaredCertificate(net, goal=base.goal)
        spec = CertificateSpec("clf", cert, rate=rate, weights=weights,
                               dt=config.dt)
    cert = spec.certificate
    net = cert.net
    policies = [ClfQpPolicy(cert, s, c=rate, relax_weight=qp_w,
                            penalty=config.penalty, u_max=config.u_max)
                for s in systems]
    if spec.policy is None:
        spec.policy = policies[0]
    A, B = pendulum_linearization(base)
    P, _ = lqr_quadratic(A, B)
    adam = AdamState(net.param_arrays())
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = r_shuffle.permutation(len(dataset))
        data = dataset.states
        sums = {}
        total = 0.0
        n_batches = 0
        for idx in _batches(order, config.batch_size):
            xb = data[idx]
            tape = Tape()
            pairs, leaves = net.watch_params(tape)
            if epoch < config.pretrain_epochs:
                target = 0.5 * np.einsum("bi,ij,bj->b", xb, P, xb)
                diff = cert(xb, params=pairs) - target
                terms = {"imitation": diff.square().mean()}
            else:
                terms = {}
                for s, pol in zip(systems, policies):
                    u, r, _ = pol.layer(xb, pairs)
                    conds = clf_condition_set(spec, s, xb, u, r, params=pairs)
                    for name, term in loss_terms(conds, weights).items():
                        terms[name] = term if name not in terms else terms[name] + term
            loss = None
            for term in terms.values():
                loss = term if loss is None else loss + term
            grads = tape.backward(loss, leaves)
            adam_step(net.param_arrays(), grads, adam, config.lr,
                      config.beta1, config.beta2, config.eps)
            total += float(loss.data)
            for name, term in terms.items():
                sums[name] = sums.get(name, 0.0) + float(term.data)
            n_batches += 1
        _finite_or_raise(total, epoch)
        row = {"epoch": epoch, "total_loss": total / n_batches}
        for name in ("imitation",) + tuple(weights):
            row[name] = sums.get(name, 0.0) / n_batches
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        history.append(row)
    return spec, history


# -- CBF on the satellite -----------------------------------------------------------


SATELLITE_WEIGHTS = {"safe_sign": 100.0, "unsafe_sign": 100.0, "relax": 1.0}


def train_cbf_satellite(config, system=None, dataset=None, spec=None):
    """The station-keeping barrier recipe.

    States are labeled by the system's safe/unsafe predicates; the sign
    terms are class-normalized per batch and the relaxation comes from the
    barrier QP around an LQR nominal controller.
    """
    system = system if system is not None else cwh_satellite()
    weights = dict(SATELLITE_WEIGHTS if config.weights is None else config.weights)
    rate = 0.1 if config.rate is None else float(config.rate)
    qp_w = 1e4 if config.qp_relax_weight is None else float(config.qp_relax_weight)
    r_sample, r_init, r_shuffle = _substreams(config.seed, 3)
    if dataset is None:
        dataset = Dataset(sample_uniform(system.x_box, config.n_samples, r_sample),
                          cap=config.cex_cap)
    if not system.unsafe_mask(dataset.states).any():
        raise ValueError("dataset contains no unsafe states; cannot fit a boundary")
    if not system.safe_mask(dataset.states).any():
        raise ValueError("dataset contains no safe states; cannot fit a boundary")
    if spec is None:
        net = Mlp((system.n, *config.hidden, 1), "tanh", rng=r_init)
        cert = ScalarCertificate(net, dim=system.n)
        spec = CertificateSpec("cbf", cert, rate=rate, weights=weights,
                               dt=config.dt)
    cert = spec.certificate
    net = cert.net
    A, B = cwh_matrices(system.params["mean_motion"], system.params["mass"])
    Pc = solve_continuous_are(A, B, np.eye(6), np.eye(3))
    nominal = LinearStateFeedback(B.T @ Pc, goal=system.goal)
    pol = CbfQpPolicy(cert, system, gamma=rate, relax_weight=qp_w,
                      penalty=config.penalty, u_max=config.u_max, u_nom=nominal)
    if spec.policy is None:
        spec.policy = pol
    adam = AdamState(net.param_arrays())
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = r_shuffle.permutation(len(dataset))
        data = dataset.states
        sums = {}
        total = 0.0
        n_batches = 0
        for idx in _batches(order, config.batch_size):
            xb = data[idx]
            safe = xb[system.safe_mask(xb)]
            unsafe = xb[system.unsafe_mask(xb)]
            if not len(safe) or not len(unsafe):
                continue  # a batch can miss a class; the epoch will not
            tape = Tape()
            pairs, leaves = net.watch_params(tape)
            _, r, _ = pol.layer(xb, pairs)
            conds = cbf_condition_set(spec, safe, unsafe, r, params=pairs)
            terms = loss_terms(conds, weights)
            loss = None
            for term in terms.values():
                loss = term if loss is None else loss + term
            grads = tape.backward(loss, leaves)
            adam_step(net.param_arrays(), grads, adam, config.lr,
                      config.beta1, config.beta2, config.eps)
            total += float(loss.data)
            for name, term in terms.items():
                sums[name] = sums.get(name, 0.0) + float(term.data)
            n_batches += 1
        if n_batches == 0:
            raise ValueError("every batch was single-class; shrink the batch size")
        _finite_or_raise(total, epoch)
        row = {"epoch": epoch, "total_loss": total / n_batches}
        for name in weights:
            row[name] = sums.get(name, 0.0) / n_batches
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        history.append(row)
    return spec, history


# -- contraction metric + cloned tracker on the car ----------------------------------


CAR_WEIGHTS = {"metric_lower": 1.0, "metric_upper": 1.0, "contraction": 1.0,
               "clone": 1.0}


def expert_tracking_law(x, x_star, u_star, gains=(1.0, 4.0, 3.0)):
    """Body-frame error feedback for the unicycle.

    v = v* cos(e_th) + k1 e_long, w = w* + k2 v* e_lat + k3 sin(e_th),
    with the position error rotated into the vehicle frame. Exponentially
    stabilizing for moderate gains and forward reference motion; stands in
    for an optimization-based expert.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    us = np.atleast_2d(np.asarray(u_star, dtype=np.float64))
    k1, k2, k3 = gains
    dx = xs[:, 0] - x[:, 0]
    dy = xs[:, 1] - x[:, 1]
    c = np.cos(x[:, 2])
    s = np.sin(x[:, 2])
    e_long = c * dx + s * dy
    e_lat = -s * dx + c * dy
    e_th = wrap_angle(xs[:, 2] - x[:, 2])
    v = us[:, 0] * np.cos(e_th) + k1 * e_long
    w = us[:, 1] + k2 * us[:, 0] * e_lat + k3 * np.sin(e_th)
    return np.stack([v, w], axis=-1)


def _sinusoid_inputs(rng):
    """Random combination of sinusoids for the reference controls."""
    v0 = rng.uniform(0.4, 0.8)
    va = rng.uniform(0.0, 0.25)
    vf = rng.uniform(0.05, 0.3)
    vp = rng.uniform(0.0, 2.0 * np.pi)
    wa = rng.uniform(0.3, 1.2, size=2)
    wf = rng.uniform(0.05, 0.35, size=2)
    wp = rng.uniform(0.0, 2.0 * np.pi, size=2)

    def fn(t):
        v = v0 + va * np.sin(2.0 * np.pi * vf * t + vp)
        w = (wa * np.sin(2.0 * np.pi * wf * t + wp)).sum()
        return np.array([v, w])

    return fn


def _wrap_theta(x):
    x = x.copy()
    x[2] = wrap_angle(x[2])
    return x


def car_demonstrations(system, config, r_ref, r_noise):
    """Expert demos: tuples (x, x*, u*, u_applied) sampled at the control rate.

    References are rejection-sampled to stay inside the position box with a
    margin, then the expert tracks each from a perturbed start; the applied
    (and recorded) action carries uniform noise, which both widens the state
    distribution and is the label the clone should reproduce.
    """
    pos_lim = system.x_box[0, 1] - 0.2
    per_tick = int(round(config.dt_ctrl / config.dt_sim))
    ticks = int(round(config.horizon / config.dt_ctrl))
    xs_rows, xstar_rows, ustar_rows, uexp_rows = [], [], [], []
    for _ in range(config.n_trajectories):
        while True:
            x0 = np.array([r_ref.uniform(-0.4, 0.4), r_ref.uniform(-0.4, 0.4),
                           r_ref.uniform(-np.pi, np.pi)])
            ref = open_loop_reference(system, _sinusoid_inputs(r_ref), x0,
                                      config.horizon, config.dt_sim,
                                      config.dt_ctrl,
                                      wrap_dims=system.angular_dims)
            if np.abs(ref.states[:, :2]).max() <= pos_lim:
                break
        x = _wrap_theta(ref.states[0] + np.array([
            r_ref.uniform(-0.3, 0.3), r_ref.uniform(-0.3, 0.3),
            r_ref.uniform(-0.3, 0.3)]))
        for k in range(ticks):
            t = k * config.dt_ctrl
            x_star = ref.state_at(t)
            u_star = ref.input_at(t)
            u = expert_tracking_law(x, x_star, u_star, config.gains)[0]
            u = u + r_noise.uniform(-config.noise, config.noise, size=2)
            xs_rows.append(x.copy())
            xstar_rows.append(x_star.copy())
            ustar_rows.append(u_star.copy())
            uexp_rows.append(u.copy())
            for _ in range(per_tick):
                x = _wrap_theta(rk4_step(lambda s: system.xdot(s, u),
                                         x, config.dt_sim))
    return (np.stack(xs_rows), np.stack(xstar_rows),
            np.stack(ustar_rows), np.stack(uexp_rows))


def closed_loop_jacobian(system, trk, x, e, u):
    """d(xdot)/dx of the tracked loop: dynamics linearization plus g K."""
    A = system.jac_f(x) + np.einsum("bm,bnmk->bnk", u, system.jac_g(x))
    K = trk.error_jacobian(x, e)
    return A + system.g(x) @ K


def train_contraction_car(config, system=None):
    """Joint metric + behavior-cloned tracker on the kinematic car.

    The metric terms see the current policy's closed loop (control and
    Jacobian held constant within each step); the policy itself is trained
    by the cloning term. Tuples come from the expert tracking randomly
    generated sinusoidal references.
    """
    system = system if system is not None else kinematic_car()
    weights = dict(CAR_WEIGHTS if config.weights is None else config.weights)
    rate = 1.0 if config.rate is None else float(config.rate)
    r_ref, r_noise, r_init, r_shuffle = _substreams(config.seed, 4)
    xs, xstar, ustar, uexp = car_demonstrations(system, config, r_ref, r_noise)
    fm = FeatureMap(system.n, angular_dims=system.angular_dims)
    met_net = Mlp((fm.out_dim, *config.hidden, system.n * system.n),
                  "tanh", rng=r_init)
    pol_net = Mlp((fm.out_dim + system.n, *config.hidden, system.m),
                  "tanh", rng=r_init)
    metric = MetricCertificate(met_net, dim=system.n, features=fm)
    trk = TrackingController(pol_net, fm, state_dim=system.n)
    spec = CertificateSpec("contraction", metric, rate=rate, weights=weights,
                           dt=config.dt, policy=trk, m_lo=config.m_lo,
                           m_hi=config.m_hi, eps_nd=config.eps_nd)
    params_all = met_net.param_arrays() + pol_net.param_arrays()
    adam = AdamState(params_all)
    errors = tracking_error(xs, xstar, system.angular_dims)
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = r_shuffle.permutation(len(xs))
        sums = {}
        total = 0.0
        n_batches = 0
        for idx in _batches(order, config.batch_size):
            xb, eb = xs[idx], errors[idx]
            usb, ueb = ustar[idx], uexp[idx]
            u_now = usb + trk.correction(xb, eb)
            J = closed_loop_jacobian(system, trk, xb, eb, u_now)
            tape = Tape()
            pairs_m, leaves_m = met_net.watch_params(tape)
            pairs_p, leaves_p = pol_net.watch_params(tape)
            conds = contraction_condition_set(spec, system, xb, u_now, J,
                                              params=pairs_m)
            u_pred = as_tensor(usb) + trk.correction(xb, eb, params=pairs_p)
            conds["clone"] = (u_pred - ueb).square().sum(axis=-1)
            terms = loss_terms(conds, weights)
            loss = None
            for term in terms.values():
                loss = term if loss is None else loss + term
            grads = tape.backward(loss, leaves_m + leaves_p)
            adam_step(params_all, grads, adam, config.lr,
                      config.beta1, config.beta2, config.eps)
            total += float(loss.data)
            for name, term in terms.items():
                sums[name] = sums.get(name, 0.0) + float(term.data)
            n_batches += 1
        _finite_or_raise(total, epoch)
        row = {"epoch": epoch, "total_loss": total / n_batches}
        for name in weights:
            row[name] = sums.get(name, 0.0) / n_batches
        row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        history.append(row)
    return spec, history
