"""Verifier behavior: sampled validation, Lipschitz grid, branch and bound,
Lipschitz machinery soundness, and the CEGIS driver."""

import numpy as np
import pytest
import scipy.linalg as sla

from neuralcert.certificates import (CertificateSpec, MetricCertificate,
                                     NormSquaredCertificate,
                                     QuadraticCertificate, ScalarCertificate)
from neuralcert.diff.mlp import Mlp, forward
from neuralcert.dynamics import pendulum, stable_linear_benchmark
from neuralcert.training import TrainConfig
from neuralcert.verification import (branch_and_bound_verify, cegis_loop,
                                     certificate_constants, ibp_bounds,
                                     lipschitz_grid_certify,
                                     net_jacobian_lipschitz, net_lipschitz,
                                     pointwise_conditions, sampling_validate,
                                     spectral_norm)
from neuralcert.verification.interval import IntervalBox, isquare
from neuralcert.verification.verify import box_conditions


def linear_spec(rate_scale=0.5):
    A = np.array([[-1.0, 0.3], [0.0, -2.0]])
    sys = stable_linear_benchmark(A, [[1.0], [0.0]], box_half_width=1.0)
    P = sla.solve_lyapunov(A.T, -np.eye(2))
    rate = rate_scale / np.linalg.eigvalsh(P).max()
    return CertificateSpec("lyapunov", QuadraticCertificate(P), rate), sys


class Negated:
    """Sign-flipped wrapper; turns a valid condition into a violated one."""

    def __init__(self, cond):
        self.cond = cond
        self.name = cond.name

    def value(self, x):
        return -self.cond.value(x)

    def interval(self, box):
        lo, hi = self.cond.interval(box)
        return -hi, -lo

    def lipschitz(self, box):
        return self.cond.lipschitz(box)


class NormMinus:
    name = "decrease"

    def __init__(self, c):
        self.c = c

    def value(self, x):
        return (x * x).sum(axis=-1) - self.c

    def interval(self, box):
        lo, hi = isquare((box.lo, box.hi))
        return lo.sum(axis=-1) - self.c, hi.sum(axis=-1) - self.c


# -- IBP enclosure -------------------------------------------------------------------


def test_ibp_encloses_forward_values():
    rng = np.random.default_rng(0)
    for _ in range(300):
        widths = (int(rng.integers(1, 4)), int(rng.integers(1, 9)),
                  int(rng.integers(1, 4)))
        act = str(rng.choice(["tanh", "softplus", "elu", "relu"]))
        net = Mlp(widths, act, rng=rng)
        lo = rng.normal(size=widths[0])
        hi = lo + rng.random(widths[0]) * 2.0
        x = lo + rng.random(widths[0]) * (hi - lo)
        olo, ohi = ibp_bounds(net, (lo, hi))
        y = forward(net, x[None])[0]
        assert np.all(y >= olo - 1e-12) and np.all(y <= ohi + 1e-12)


# -- Lipschitz machinery ----------------------------------------------------------------


def test_spectral_norm_matches_svd():
    rng = np.random.default_rng(1)
    for _ in range(20):
        W = rng.normal(size=(int(rng.integers(1, 7)), int(rng.integers(1, 7))))
        assert spectral_norm(W) == pytest.approx(np.linalg.svd(W)[1][0],
                                                 rel=1e-8)


def test_net_lipschitz_bounds_sampled_slopes():
    rng = np.random.default_rng(2)
    for _ in range(10):
        net = Mlp((3, 16, 16, 2), "tanh", rng=rng)
        L = net_lipschitz(net)
        x = rng.normal(size=(200, 3))
        y = x + rng.normal(size=(200, 3)) * 0.1
        num = np.linalg.norm(forward(net, x) - forward(net, y), axis=-1)
        den = np.linalg.norm(x - y, axis=-1)
        assert (num <= L * den * (1 + 1e-9)).all()


def test_jacobian_lipschitz_bounds_sampled_gradient_slopes():
    rng = np.random.default_rng(3)
    net = Mlp((2, 12, 1), "tanh", rng=rng)
    LJ = net_jacobian_lipschitz(net)
    cert = ScalarCertificate(net, dim=2)
    x = rng.normal(size=(300, 2))
    y = x + rng.normal(size=(300, 2)) * 0.05
    num = np.linalg.norm(cert.gradient(x) - cert.gradient(y), axis=-1)
    den = np.linalg.norm(x - y, axis=-1)
    assert (num <= LJ * den * (1 + 1e-9)).all()


def test_jacobian_lipschitz_rejects_relu():
    net = Mlp((2, 4, 1), "relu", rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        net_jacobian_lipschitz(net)


def test_certificate_constants_bound_sampled_behavior():
    rng = np.random.default_rng(4)
    box = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    quad = QuadraticCertificate([[2.0, 0.3], [0.3, 1.0]])
    ns = NormSquaredCertificate(Mlp((2, 8, 3), "tanh", rng=rng),
                                goal=[0.0, 0.0])
    sc = ScalarCertificate(Mlp((2, 8, 1), "tanh", rng=rng), dim=2)
    for cert in (quad, ns, sc):
        lv, sg, lg = certificate_constants(cert, box)
        x = rng.uniform(-1, 1, size=(400, 2))
        y = np.clip(x + rng.normal(size=(400, 2)) * 0.1, -1, 1)
        d = np.linalg.norm(x - y, axis=-1)
        assert (np.abs(cert(x) - cert(y)) <= lv * d + 1e-12).all()
        assert (np.linalg.norm(cert.gradient(x), axis=-1) <= sg + 1e-12).all()
        gdiff = np.linalg.norm(cert.gradient(x) - cert.gradient(y), axis=-1)
        assert (gdiff <= lg * d + 1e-12).all()


def test_certificate_constants_rejects_metric():
    net = Mlp((3, 8, 9), "tanh", rng=np.random.default_rng(0))
    cert = MetricCertificate(net, dim=3)
    with pytest.raises(ValueError):
        certificate_constants(cert, (np.zeros(3), np.ones(3)))


# -- sampled validation ------------------------------------------------------------------


def test_sampling_never_certifies():
    spec, sys = linear_spec()
    rep = sampling_validate(spec, sys, 5000, seed=1)
    assert rep.verdict == "inconclusive"
    assert rep.violations == 0
    assert rep.samples == 5000
    assert "cannot certify" in rep.note


def test_sampling_falsifies_negated_certificate():
    spec, sys = linear_spec()
    # a rate far above 1/lambda_max makes the decrease fail on most states
    bad = CertificateSpec("lyapunov", spec.certificate, rate=50.0)
    rep = sampling_validate(bad, sys, 2000, seed=1)
    assert rep.verdict == "falsified"
    assert rep.violations > 1000
    assert rep.counterexamples
    cond = box_conditions(bad, sys)[0]
    for cex in rep.counterexamples:
        assert cond.value(cex.state[None])[0] > 0
        assert cex.residual > 0


def test_sampling_rejects_empty_sample():
    spec, sys = linear_spec()
    with pytest.raises(ValueError):
        sampling_validate(spec, sys, 0)


def test_pointwise_clf_needs_policy():
    spec, sys = linear_spec()
    clf = CertificateSpec("clf", spec.certificate, 1.0)
    with pytest.raises(ValueError):
        pointwise_conditions(clf, sys, np.zeros((4, 2)))


# -- grid certification -------------------------------------------------------------------


def test_grid_certifies_constant_negative_residual():
    spec, sys = linear_spec()

    class Const:
        name = "decrease"

        def value(self, x):
            return np.full(x.shape[:-1], -1.0)

    rep = lipschitz_grid_certify(spec, sys, tau=0.1, conditions=[Const()],
                                 L_estimates={"decrease": 0.5}, exclude=None)
    assert rep.verdict == "certified"
    # margin 0.5 * cell radius required, met everywhere with room
    assert rep.worst_margin < -0.8


def test_grid_falsifies_sign_residual():
    spec, sys = linear_spec()

    class Coord:
        name = "decrease"

        def value(self, x):
            return x[..., 0]

    rep = lipschitz_grid_certify(spec, sys, tau=0.05, conditions=[Coord()],
                                 L_estimates={"decrease": 1.0}, exclude=None)
    assert rep.verdict == "falsified"
    for cex in rep.counterexamples:
        assert cex.state[0] > 0 and cex.residual > 0


def test_grid_budget_exceeded_is_inconclusive_with_guidance():
    spec, sys = linear_spec()
    rep = lipschitz_grid_certify(spec, sys, tau=1e-4, budget=1000)
    assert rep.verdict == "inconclusive"
    assert "raise tau" in rep.note


def test_grid_certifies_analytic_quadratic():
    spec, sys = linear_spec()
    window = (np.array([-0.2, -0.2]), np.array([0.2, 0.2]))
    rep = lipschitz_grid_certify(spec, sys, tau=1e-3, exclude=window)
    assert rep.verdict == "certified"
    assert rep.worst_margin <= 0


def test_grid_rejects_bad_tau():
    spec, sys = linear_spec()
    with pytest.raises(ValueError):
        lipschitz_grid_certify(spec, sys, tau=0.0)


# -- branch and bound ---------------------------------------------------------------------


def test_bnb_certifies_norm_residual_with_slack():
    spec, sys = linear_spec()
    rep = branch_and_bound_verify(spec, sys, conditions=[NormMinus(4.0)],
                                  exclude=None)
    assert rep.verdict == "certified"
    assert rep.worst_margin <= -2.0


def test_bnb_falsifies_with_concrete_counterexample():
    spec, sys = linear_spec()
    rep = branch_and_bound_verify(spec, sys, conditions=[NormMinus(0.5)],
                                  exclude=None)
    assert rep.verdict == "falsified"
    assert rep.counterexamples
    cond = NormMinus(0.5)
    for cex in rep.counterexamples:
        assert cond.value(cex.state[None])[0] > 0


def test_bnb_one_cell_budget_is_inconclusive():
    spec, sys = linear_spec()
    rep = branch_and_bound_verify(spec, sys, conditions=[NormMinus(0.5)],
                                  exclude=None, max_cells=1)
    assert rep.verdict == "inconclusive"
    assert "budget" in rep.note


def test_bnb_rejects_nonpositive_budget():
    spec, sys = linear_spec()
    with pytest.raises(ValueError):
        branch_and_bound_verify(spec, sys, max_cells=0)


def test_bnb_certifies_analytic_quadratic_by_default():
    spec, sys = linear_spec()
    rep = branch_and_bound_verify(spec, sys)
    assert rep.verdict == "certified"
    assert rep.worst_margin <= 0
    assert "excluded window" in rep.note


def test_bnb_certifies_clf_existence_with_bounded_controls():
    A = -np.eye(2)
    sys = stable_linear_benchmark(A, np.eye(2), box_half_width=1.0)
    sys.u_box = np.array([[-1.0, 1.0], [-1.0, 1.0]])
    spec = CertificateSpec("clf", QuadraticCertificate(np.eye(2)), 1.0)
    rep = branch_and_bound_verify(spec, sys, max_cells=20000)
    assert rep.verdict == "certified"


def test_existence_condition_needs_bounded_controls():
    spec, sys = linear_spec()
    clf = CertificateSpec("clf", spec.certificate, 1.0)
    assert sys.u_box is None
    with pytest.raises(ValueError):
        branch_and_bound_verify(clf, sys)


def test_box_conditions_reject_contraction():
    net = Mlp((3, 8, 9), "tanh", rng=np.random.default_rng(0))
    spec = CertificateSpec("contraction", MetricCertificate(net, dim=3), 1.0)
    with pytest.raises(ValueError):
        box_conditions(spec, pendulum())


# -- cross-method agreement ---------------------------------------------------------------


def test_grid_and_bnb_agree_on_quadratic():
    spec, sys = linear_spec()
    window = (np.array([-0.2, -0.2]), np.array([0.2, 0.2]))
    grid = lipschitz_grid_certify(spec, sys, tau=1e-3, exclude=window)
    bnb = branch_and_bound_verify(spec, sys, exclude=window)
    assert grid.verdict == "certified" and bnb.verdict == "certified"
    neg = [Negated(c) for c in box_conditions(spec, sys)]
    gneg = lipschitz_grid_certify(spec, sys, tau=0.01, exclude=window,
                                  conditions=neg)
    bneg = branch_and_bound_verify(spec, sys, exclude=window, conditions=neg)
    assert gneg.verdict == "falsified" and bneg.verdict == "falsified"
    for rep in (gneg, bneg):
        for cex in rep.counterexamples:
            assert neg[0].value(cex.state[None])[0] > 0


# -- report serialization -----------------------------------------------------------------


def test_report_serialization_deterministic(tmp_path):
    spec, sys = linear_spec()
    bad = CertificateSpec("lyapunov", spec.certificate, rate=50.0)
    paths = []
    for name in ("a.txt", "b.txt"):
        rep = sampling_validate(bad, sys, 500, seed=3)
        p = tmp_path / name
        rep.write(p)
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]
    text = paths[0].decode()
    assert "verdict: falsified" in text
    assert "wall" not in text


def test_counterexample_csv(tmp_path):
    spec, sys = linear_spec()
    bad = CertificateSpec("lyapunov", spec.certificate, rate=50.0)
    rep = sampling_validate(bad, sys, 500, seed=3)
    p = tmp_path / "cex.csv"
    rep.write_counterexamples_csv(p)
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "condition,residual,x_0,x_1"
    assert len(lines) == len(rep.counterexamples) + 1
    first = lines[1].split(",")
    assert float(first[1]) == rep.counterexamples[0].residual


# -- CEGIS -------------------------------------------------------------------------------


def cegis_config():
    return TrainConfig(n_samples=256, batch_size=64, epochs=3,
                       pretrain_epochs=1, hidden=(8,), out_dim=3, seed=4)


def test_cegis_runs_rounds_and_grows_dataset():
    res = cegis_loop(cegis_config(), rounds=3, validate_n=1000,
                     finetune_epochs=2)
    assert len(res.reports) == 3
    assert len(res.violations) == 3
    assert len(res.dataset.states) > len(res.dataset.base)
    assert res.spec.policy is not None


def test_cegis_deterministic():
    a = cegis_loop(cegis_config(), rounds=2, validate_n=500,
                   finetune_epochs=1)
    b = cegis_loop(cegis_config(), rounds=2, validate_n=500,
                   finetune_epochs=1)
    assert a.violations == b.violations
    assert a.reports[-1].worst_margin == b.reports[-1].worst_margin


def test_cegis_rejects_zero_rounds():
    with pytest.raises(ValueError):
        cegis_loop(cegis_config(), rounds=0)
