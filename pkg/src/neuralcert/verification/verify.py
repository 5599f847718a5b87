"""Certificate checking: sampled validation, Lipschitz-grid certification,
and interval branch-and-bound.

The box-based methods (grid, IBP) certify the decrease-type condition of a
spec: the autonomous Lyapunov decrease for "lyapunov" kinds, or the
existence form min_u of the decrease over the system's control box for
"clf"/"cbf" kinds. Positivity of the norm-squared construction holds by
construction and scalar sign conditions live on sampled sets, so those
stay with the sampling validator, as do the matrix conditions of
contraction specs. A sampling result is never "certified": with no
violations found the verdict stays inconclusive and the caller reads the
margins.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ..certificates import (NormSquaredCertificate, QuadraticCertificate,
                            ScalarCertificate, cbf_residuals,
                            clf_condition_set, contraction_condition_set,
                            lie_derivatives)
from . import interval as iv
from .interval import IntervalBox


@dataclass
class Counterexample:
    state: np.ndarray
    condition: str
    residual: float


@dataclass
class VerificationReport:
    """Outcome of one verification run.

    worst_margin is the largest signed slack against the method's pass
    threshold (nonpositive means every check passed); wall_s is honest
    timing and deliberately excluded from the serialized form so reruns
    produce identical report files.
    """

    verdict: str
    method: str
    counterexamples: list = field(default_factory=list)
    worst_margin: float = float("nan")
    cells: int = 0
    wall_s: float = 0.0
    samples: int = 0
    violations: int = 0
    note: str = ""

    def to_text(self):
        lines = [f"verdict: {self.verdict}",
                 f"method: {self.method}",
                 f"cells: {self.cells}",
                 f"samples: {self.samples}",
                 f"violations: {self.violations}",
                 f"worst_margin: {_g(self.worst_margin)}",
                 f"note: {self.note}",
                 f"counterexamples: {len(self.counterexamples)}"]
        for cex in self.counterexamples:
            state = ",".join(_g(v) for v in cex.state)
            lines.append(f"counterexample: condition={cex.condition} "
                         f"residual={_g(cex.residual)} state={state}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def write_counterexamples_csv(self, path):
        n = len(self.counterexamples[0].state) if self.counterexamples else 0
        with open(path, "w") as fh:
            fh.write(",".join(["condition", "residual"]
                              + [f"x_{i}" for i in range(n)]) + "\n")
            for cex in self.counterexamples:
                fh.write(",".join([cex.condition, _g(cex.residual)]
                                  + [_g(v) for v in cex.state]) + "\n")


def _g(v):
    return format(float(v), ".17g")


def _as_box(system, box):
    if box is None:
        return IntervalBox(system.x_box[:, 0], system.x_box[:, 1])
    if isinstance(box, IntervalBox):
        return box
    box = np.asarray(box, dtype=np.float64)
    return IntervalBox(box[:, 0], box[:, 1])


# -- pointwise condition residuals (positive = violation) ---------------------------


def _error_box(system):
    w = system.x_box[:, 1] - system.x_box[:, 0]
    return np.stack([-0.125 * w, 0.125 * w], axis=-1)


def pointwise_conditions(spec, system, x, rng=None):
    """Exact residuals at sampled states, as {name: (states, residuals)}.

    CLF and CBF decrease terms run the spec's own controller; contraction
    conditions draw tracking errors from a quarter-width box around zero
    (rng required) and evaluate the closed-loop matrix inequality.
    """
    cert = spec.certificate
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "lyapunov":
        V = cert(x)
        grad = cert.gradient(x)
        dec = (grad * system.f(x)).sum(axis=-1) + spec.rate * V
        return {"decrease": (x, dec), "positivity": (x, -V)}
    if spec.kind == "clf":
        if spec.policy is None:
            raise ValueError("clf validation needs the policy on the spec")
        out = spec.policy.detail(x)
        conds = clf_condition_set(spec, system, x, out.u, out.relaxation)
        return {name: (x, conds[name])
                for name in ("positivity", "decrease", "decrease_fd")}
    if spec.kind == "cbf":
        safe = system.safe_mask(x)
        unsafe = system.unsafe_mask(x)
        h = cert(x)
        res = {"safe_sign": (x[safe], h[safe]),
               "unsafe_sign": (x[unsafe], -h[unsafe])}
        if spec.policy is not None:
            u = spec.policy.detail(x).u
            _, dec = cbf_residuals(cert, system, x, u, gamma=spec.rate)
            res["decrease"] = (x, dec)
        return res
    if spec.kind == "contraction":
        if spec.policy is None:
            raise ValueError("contraction validation needs the tracking policy")
        if rng is None:
            raise ValueError("contraction validation draws errors; pass rng")
        from ..training import closed_loop_jacobian
        ebox = _error_box(system)
        e = ebox[:, 0] + rng.random(x.shape) * (ebox[:, 1] - ebox[:, 0])
        u = spec.policy.correction(x, e)
        J = closed_loop_jacobian(system, spec.policy, x, e, u)
        conds = contraction_condition_set(spec, system, x, u, J)
        return {name: (x, r) for name, r in conds.items()}
    raise ValueError(f"unknown certificate kind {spec.kind!r}")


def _collect_counterexamples(conds, tol, cap):
    out = []
    for name in sorted(conds):
        states, res = conds[name]
        bad = np.flatnonzero(res > tol)
        bad = bad[np.argsort(-res[bad])]
        for i in bad[:cap]:
            out.append(Counterexample(state=states[i].copy(), condition=name,
                                      residual=float(res[i])))
    out.sort(key=lambda c: -c.residual)
    return out[:cap]


def sampling_validate(spec, system, n_samples, seed=0, tol=0.0,
                      max_counterexamples=100):
    """Check the spec's conditions at uniform random states.

    Statistical evidence only: the verdict is falsified when a violation
    turns up and inconclusive otherwise, never certified.
    """
    if n_samples <= 0:
        raise ValueError("need a positive sample count")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    lo, hi = system.x_box[:, 0], system.x_box[:, 1]
    x = lo + rng.random((int(n_samples), system.n)) * (hi - lo)
    conds = pointwise_conditions(spec, system, x, rng=rng)
    violations = sum(int((res > tol).sum()) for _, res in conds.values())
    worst = max((float(res.max()) for _, res in conds.values() if len(res)),
                default=float("nan"))
    return VerificationReport(
        verdict="falsified" if violations else "inconclusive",
        method="sample",
        counterexamples=_collect_counterexamples(conds, tol,
                                                 max_counterexamples),
        worst_margin=worst, cells=int(n_samples), samples=int(n_samples),
        violations=violations, wall_s=time.perf_counter() - t0,
        note="" if violations else
        "no violations found; sampling cannot certify")


class NegatedCertificate:
    """V -> -V. Turns a valid certificate into a failing one on purpose,
    for exercising the falsification paths end to end."""

    def __init__(self, inner):
        self.inner = inner
        self.goal = getattr(inner, "goal", None)

    def __call__(self, x, params=None):
        return -(self.inner(x) if params is None
                 else self.inner(x, params=params))

    def gradient(self, x):
        return -self.inner.gradient(x)

    def value_bounds(self, box):
        lo, hi = self.inner.value_bounds(box)
        return -hi, -lo

    def gradient_bounds(self, box):
        lo, hi = self.inner.gradient_bounds(box)
        return -hi, -lo


# -- Lipschitz machinery --------------------------------------------------------------


def spectral_norm(W, iters=50):
    """Largest singular value by power iteration from a fixed start."""
    W = np.asarray(W, dtype=np.float64)
    v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
    for _ in range(int(iters)):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = W.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v = v / nv
    return float(np.linalg.norm(W @ v))


# max |act'| and max |act''|; grid bounds need a C^1 activation
_ACT_SLOPE = {"tanh": 1.0, "softplus": 1.0, "elu": 1.0, "relu": 1.0}
_ACT_CURVATURE = {"tanh": 4.0 / (3.0 * np.sqrt(3.0)), "softplus": 0.25,
                  "elu": 1.0}


def net_lipschitz(net):
    """Product of layer spectral norms, an upper bound on the net's slope."""
    s1 = _ACT_SLOPE[net.activation]
    out = 1.0
    for W in net.weights:
        out *= spectral_norm(W)
    return out * s1 ** (len(net.weights) - 1)


def net_jacobian_lipschitz(net):
    """Upper bound on the Lipschitz constant of the network Jacobian."""
    if net.activation not in _ACT_CURVATURE:
        raise ValueError(
            f"gradient Lipschitz bound needs a smooth activation, "
            f"got {net.activation!r}")
    s2 = _ACT_CURVATURE[net.activation]
    sig = [spectral_norm(W) for W in net.weights]
    base = float(np.prod(sig))
    total = 0.0
    c = 1.0
    for k in range(len(sig) - 1):   # one term per activation layer
        c *= sig[k]
        total += base * s2 * c
    return total


def _sup_vec_norm(vlo, vhi):
    return float(np.linalg.norm(np.maximum(np.abs(vlo), np.abs(vhi))))


def _feature_lip(features):
    # d(sin,cos) columns have unit norm; the identity block is constant
    return (np.sqrt(2.0), 1.0) if features.angular_dims else (0.0, 1.0)


def certificate_constants(cert, box):
    """(L_value, sup_grad, L_grad) over the box for the scalar families."""
    if isinstance(cert, NegatedCertificate):
        return certificate_constants(cert.inner, box)   # sign-invariant
    lo, hi = (box.lo, box.hi) if isinstance(box, IntervalBox) else box
    if isinstance(cert, QuadraticCertificate):
        r = _sup_vec_norm(lo - cert.goal, hi - cert.goal)
        pn = spectral_norm(cert.P)
        return 2.0 * pn * r, 2.0 * pn * r, 2.0 * pn
    if isinstance(cert, NormSquaredCertificate):
        fbox = cert.features.interval((lo, hi))
        olo, ohi = iv.ibp_bounds(cert.net, fbox)
        og = cert._goal_output()
        d = _sup_vec_norm(olo - og, ohi - og)
        ln = net_lipschitz(cert.net)
        lj = net_jacobian_lipschitz(cert.net)
        jf_lip, jf_sup = _feature_lip(cert.features)
        sup_g = 2.0 * d * ln * jf_sup
        l_grad_f = 2.0 * (lj * d + ln * ln)
        return 2.0 * d * ln, sup_g, jf_lip * 2.0 * d * ln + l_grad_f
    if isinstance(cert, ScalarCertificate):
        ln = net_lipschitz(cert.net)
        lj = net_jacobian_lipschitz(cert.net)
        jf_lip, jf_sup = _feature_lip(cert.features)
        return ln, ln * jf_sup, jf_lip * ln + lj
    raise ValueError("no Lipschitz model for this certificate type")


# -- box conditions (interval value + Lipschitz constant) -----------------------------


class DecreaseCondition:
    """Autonomous decrease grad(V) . f + rate V for Lyapunov specs."""

    name = "decrease"

    def __init__(self, cert, system, rate):
        self.cert = cert
        self.system = system
        self.rate = rate

    def value(self, x):
        V = self.cert(x)
        grad = self.cert.gradient(x)
        return (grad * self.system.f(x)).sum(axis=-1) + self.rate * V

    def interval(self, box):
        g = self.cert.gradient_bounds((box.lo, box.hi))
        f = self.system.f_interval(box.lo, box.hi)
        dlo, dhi = iv.idot(g, f)
        vlo, vhi = self.cert.value_bounds((box.lo, box.hi))
        return dlo + self.rate * vlo, dhi + self.rate * vhi

    def lipschitz(self, box):
        lv, sg, lg = certificate_constants(self.cert, box)
        flo, fhi = self.system.f_interval(box.lo, box.hi)
        fsup = _sup_vec_norm(flo, fhi)
        return lg * fsup + sg * self.system.f_lip + self.rate * lv


class ExistenceCondition:
    """Best-case decrease over the control box: min_u of the Lie residual.

    Nonpositive everywhere means an admissible input can always meet the
    decrease (clf) or barrier (cbf) rate; this is the pointwise existence
    form of the condition, independent of any particular controller.
    """

    name = "decrease_exists"

    def __init__(self, cert, system, rate):
        if system.u_box is None or not np.all(np.isfinite(system.u_box)):
            raise ValueError("existence verification needs a bounded control box")
        self.cert = cert
        self.system = system
        self.rate = rate
        self.u_lo = system.u_box[:, 0]
        self.u_hi = system.u_box[:, 1]

    def value(self, x):
        V, LfV, LgV = lie_derivatives(self.cert, self.system, x)
        best = np.minimum(LgV * self.u_lo, LgV * self.u_hi).sum(axis=-1)
        return LfV + self.rate * V + best

    def interval(self, box):
        g = self.cert.gradient_bounds((box.lo, box.hi))
        f = self.system.f_interval(box.lo, box.hi)
        lo, hi = iv.idot(g, f)
        vlo, vhi = self.cert.value_bounds((box.lo, box.hi))
        lo += self.rate * vlo
        hi += self.rate * vhi
        glo, ghi = self.system.g_interval(box.lo, box.hi)
        for i in range(self.system.m):
            llo, lhi = iv.idot(g, (glo[..., i], ghi[..., i]))
            alo, ahi = iv.iscale(self.u_lo[i], (llo, lhi))
            blo, bhi = iv.iscale(self.u_hi[i], (llo, lhi))
            # interval extension of min(a, b): endpoints minimize separately
            lo += np.minimum(alo, blo)
            hi += np.minimum(ahi, bhi)
        return lo, hi

    def lipschitz(self, box):
        lv, sg, lg = certificate_constants(self.cert, box)
        flo, fhi = self.system.f_interval(box.lo, box.hi)
        out = lg * _sup_vec_norm(flo, fhi) + sg * self.system.f_lip
        out += self.rate * lv
        glo, ghi = self.system.g_interval(box.lo, box.hi)
        for i in range(self.system.m):
            gi = _sup_vec_norm(glo[..., i], ghi[..., i])
            ubar = max(abs(self.u_lo[i]), abs(self.u_hi[i]))
            out += ubar * (lg * gi + sg * self.system.g_lip)
        return out


def box_conditions(spec, system):
    if spec.kind == "lyapunov":
        return [DecreaseCondition(spec.certificate, system, spec.rate)]
    if spec.kind in ("clf", "cbf"):
        return [ExistenceCondition(spec.certificate, system, spec.rate)]
    raise ValueError(
        "matrix-valued contraction conditions are validated by sampling only")


def _carve(root, window):
    """Cover root minus the open window with at most 2n disjoint boxes."""
    lo, hi = root.lo.copy(), root.hi.copy()
    wlo = np.maximum(np.asarray(window[0], dtype=np.float64), lo)
    whi = np.minimum(np.asarray(window[1], dtype=np.float64), hi)
    if np.any(wlo >= whi):
        return [root]
    out = []
    for d in range(len(lo)):
        if wlo[d] > lo[d]:
            h = hi.copy()
            h[d] = wlo[d]
            out.append(IntervalBox(lo.copy(), h))
        if whi[d] < hi[d]:
            l = lo.copy()
            l[d] = whi[d]
            out.append(IntervalBox(l, hi.copy()))
        lo[d], hi[d] = wlo[d], whi[d]
    return out


def _goal_window(spec, root, frac=0.05):
    """Exclusion window around the goal for conditions that vanish there.

    Lyapunov and CLF decrease residuals are exactly zero at the
    equilibrium, so no margin-based method can pass on a box containing
    it; carving a small window out of the domain keeps the methods sound
    on the rest. CBF residuals have strict slack at the goal, so no
    window is needed.
    """
    if spec.kind not in ("lyapunov", "clf"):
        return None
    goal = getattr(spec.certificate, "goal", None)
    if goal is None:
        return None
    half = frac * root.width
    return (np.maximum(goal - half, root.lo),
            np.minimum(goal + half, root.hi))


def _resolve_domains(spec, root, exclude):
    if exclude is None:
        return [root], ""
    if isinstance(exclude, str):
        if exclude != "auto":
            raise ValueError("exclude must be None, 'auto', or a (lo, hi) pair")
        window = _goal_window(spec, root)
        if window is None:
            return [root], ""
    else:
        window = (np.asarray(exclude[0], dtype=np.float64),
                  np.asarray(exclude[1], dtype=np.float64))
    lo = ",".join(_g(v) for v in window[0])
    hi = ",".join(_g(v) for v in window[1])
    return _carve(root, window), f"excluded window [{lo}] to [{hi}]"


# -- grid certification ----------------------------------------------------------------


def _grid_chunks(lo, step, counts, chunk):
    total = int(np.prod(counts))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        coords = np.array(np.unravel_index(idx, counts)).T
        yield lo + (coords + 0.5) * step


def lipschitz_grid_certify(spec, system, tau=0.02, L_estimates=None, box=None,
                           exclude="auto", conditions=None, budget=int(1e7),
                           tol=0.0, max_counterexamples=100):
    """Grid check with Lipschitz margins.

    tau is the half-spacing as a fraction of each dimension's width, so the
    grid resolves every dimension equally; a residual passing at a cell
    center with margin L * (cell circumradius) passes throughout the cell.
    Certified needs every center to pass with margin; a strictly positive
    center residual falsifies; margin failures alone are inconclusive.
    exclude carves a window out of the domain ("auto" removes a small
    neighborhood of the goal for conditions that vanish there).
    """
    t0 = time.perf_counter()
    root = _as_box(system, box)
    if tau <= 0 or tau >= 0.5:
        raise ValueError("tau must lie in (0, 0.5)")
    if conditions is None:
        conditions = box_conditions(spec, system)
    domains, dnote = _resolve_domains(spec, root, exclude)
    n = len(root.lo)
    count = int(np.ceil(1.0 / (2.0 * tau)))
    counts = np.full(n, count)
    total = count ** n * len(domains)
    if total > budget:
        return VerificationReport(
            verdict="inconclusive", method="grid", cells=0,
            wall_s=time.perf_counter() - t0,
            note=f"grid of {total} points exceeds the budget of {budget}; "
                 f"raise tau or the budget")
    worst = -np.inf
    cexs = []
    falsified = False
    for dom in domains:
        step = dom.width / counts
        radius = float(np.linalg.norm(step / 2.0))
        L = {}
        for cond in conditions:
            if L_estimates and cond.name in L_estimates:
                L[cond.name] = float(L_estimates[cond.name])
            else:
                L[cond.name] = cond.lipschitz(dom)
        for pts in _grid_chunks(dom.lo, step, counts, 65536):
            for cond in conditions:
                res = cond.value(pts)
                margin = res + L[cond.name] * radius
                worst = max(worst, float(margin.max()))
                bad = np.flatnonzero(margin > 0.0)
                if len(bad) and len(cexs) < max_counterexamples:
                    order = bad[np.argsort(-res[bad])]
                    for i in order[:max_counterexamples - len(cexs)]:
                        cexs.append(Counterexample(state=pts[i].copy(),
                                                   condition=cond.name,
                                                   residual=float(res[i])))
                if (res > tol).any():
                    falsified = True
    cexs.sort(key=lambda c: -c.residual)
    if falsified:
        verdict = "falsified"
        note = "grid point violates the condition outright"
    elif worst <= 0.0:
        verdict = "certified"
        note = ""
    else:
        verdict = "inconclusive"
        note = ("margin failures without outright violations; "
                "shrink tau for a finer grid")
    return VerificationReport(
        verdict=verdict, method="grid",
        counterexamples=[c for c in cexs if c.residual > tol] if falsified
        else cexs,
        worst_margin=worst, cells=total,
        violations=sum(c.residual > tol for c in cexs),
        wall_s=time.perf_counter() - t0,
        note="; ".join(s for s in (note, dnote) if s))


# -- interval branch and bound ----------------------------------------------------------


def branch_and_bound_verify(spec, system, box=None, exclude="auto",
                            conditions=None, max_cells=100000,
                            min_width=1e-4, tol=0.0, max_counterexamples=100):
    """Certify residual <= 0 over the box by recursive interval evaluation.

    A box whose residual upper bounds are all nonpositive is done; otherwise
    its midpoint is checked exactly (a strictly positive value falsifies)
    and the box splits along its widest dimension. Exhausting the cell
    budget, or hitting min_width while undecided, gives inconclusive.
    exclude behaves as in lipschitz_grid_certify.
    """
    if max_cells <= 0:
        raise ValueError("cell budget must be positive")
    t0 = time.perf_counter()
    root = _as_box(system, box)
    if conditions is None:
        conditions = box_conditions(spec, system)
    stack, dnote = _resolve_domains(spec, root, exclude)
    stack = list(stack)
    cells = 0
    cexs = []
    undecided = 0
    worst_certified = -np.inf
    worst_open = -np.inf
    while stack and cells < max_cells:
        b = stack.pop()
        cells += 1
        top = -np.inf
        for cond in conditions:
            _, rhi = cond.interval(b)
            top = max(top, float(rhi))
        if top <= 0.0:
            worst_certified = max(worst_certified, top)
            continue
        mid = b.midpoint[None]
        hit = False
        for cond in conditions:
            r = float(cond.value(mid)[0])
            if r > tol:
                hit = True
                if len(cexs) < max_counterexamples:
                    cexs.append(Counterexample(state=b.midpoint.copy(),
                                               condition=cond.name,
                                               residual=r))
        if hit:
            continue   # violation recorded; no need to refine this box
        if float(b.width.max()) <= min_width:
            undecided += 1
            worst_open = max(worst_open, top)
            continue
        worst_open = max(worst_open, top)   # children pending, bound stands
        stack.extend(b.split())
    if stack:
        undecided += len(stack)
        note = f"cell budget {max_cells} exhausted"
    elif undecided:
        note = "boxes below min_width remain undecided"
    else:
        note = ""
    cexs.sort(key=lambda c: -c.residual)
    if cexs:
        verdict, worst = "falsified", cexs[0].residual
        note = note or "midpoint violates the condition"
    elif undecided == 0:
        verdict, worst = "certified", worst_certified
    else:
        verdict, worst = "inconclusive", worst_open
    return VerificationReport(
        verdict=verdict, method="ibp", counterexamples=cexs,
        worst_margin=float(worst), cells=cells, violations=len(cexs),
        wall_s=time.perf_counter() - t0,
        note="; ".join(s for s in (note, dnote) if s))
