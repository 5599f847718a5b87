"""Differentiable QP layer and policy tests.

The backward pass of the QP layer is implicit differentiation of the KKT
system, so the strongest check available is agreement with finite
differences through the full solver, exercised across both penalty kinds
and random active sets.
"""

import numpy as np
import pytest

from neuralcert.certificates import (
    FeatureMap,
    NormSquaredCertificate,
    ScalarCertificate,
    cbf_residuals,
    clf_residuals,
)
from neuralcert.controllers.policies import (
    CbfQpPolicy,
    ClfCbfQpPolicy,
    ClfQpPolicy,
    LinearStateFeedback,
    TrackingController,
    box_rows,
)
from neuralcert.controllers.qp import RelaxedQpController
from neuralcert.diff.mlp import Mlp
from neuralcert.diff.tensor import Tape, as_tensor
from neuralcert.dynamics import pendulum

from oracles import fd_grad, qp_grid_oracle, qp_objective


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- RelaxedQpController ---------------------------------------------------------


def test_controller_validation():
    with pytest.raises(ValueError):
        RelaxedQpController(np.array([[1.0, 2.0], [0.0, 1.0]]), [1.0])
    with pytest.raises(ValueError):
        RelaxedQpController(-np.eye(2), [1.0])
    with pytest.raises(ValueError):
        RelaxedQpController(np.eye(2), [0.0])
    with pytest.raises(ValueError):
        RelaxedQpController(np.eye(2), [1.0], penalty="cubic")


def test_hinge_regimes_hand_case():
    # min u0^2+u1^2 + 3*hinge(u0 - b): for b=-1 the row binds (mu=2 < 3),
    # for b=-2 the hinge saturates (u0 stops at -1.5 where 2|u0| = w)
    ctrl = RelaxedQpController(2.0 * np.eye(2), [3.0])
    q = np.zeros((1, 2))
    A = np.array([[[1.0, 0.0]]])
    sol = ctrl.solve_batch(q, A, np.array([[-1.0]]))
    assert sol.u[0] == pytest.approx([-1.0, 0.0])
    assert not sol.saturated[0, 0]
    assert sol.mu_soft[0, 0] == pytest.approx(2.0)
    assert sol.relaxation[0, 0] == pytest.approx(0.0)

    sol = ctrl.solve_batch(q, A, np.array([[-2.0]]))
    assert sol.u[0] == pytest.approx([-1.5, 0.0])
    assert sol.saturated[0, 0]
    assert sol.relaxation[0, 0] == pytest.approx(0.5)
    assert sol.mu_soft[0, 0] == pytest.approx(3.0)  # hinge slope


def test_quad_penalty_hand_case():
    # min u^2 + 2*r^2 with r >= u - b at b=-1: stationarity gives u = -2/3? no:
    # trade 2u + 4w... solve: u = b + r, min (b+r)^2 + 2 r^2 -> r = -b/3 = 1/3
    ctrl = RelaxedQpController(2.0 * np.eye(1), [2.0], penalty="quad")
    sol = ctrl.solve_batch(np.zeros((1, 1)), np.array([[[1.0]]]),
                           np.array([[-1.0]]))
    assert sol.relaxation[0, 0] == pytest.approx(1.0 / 3.0)
    assert sol.u[0, 0] == pytest.approx(-2.0 / 3.0)


def test_infeasible_soft_rows_relax_instead_of_failing():
    # two contradictory soft rows inside a tight box: the solver must relax,
    # not report infeasibility
    hard_A, hard_b = box_rows(2.0, 2)
    ctrl = RelaxedQpController(2.0 * np.eye(2), [1.0, 1.0],
                               hard_A=hard_A, hard_b=hard_b)
    A = np.array([[[0.25, 1.03], [0.16, -0.59]]])
    b = np.array([[-1.34, -1.40]])
    sol = ctrl.solve_batch(np.zeros((1, 2)), A, b)
    assert np.all(np.abs(sol.u) <= 2.0 + 1e-9)
    assert sol.relaxation.max() > 0


@pytest.mark.parametrize("penalty", ["linear", "quad"])
def test_solve_matches_grid_oracle(penalty):
    rng = _rng(5)
    hard_A, hard_b = box_rows(2.0, 2)
    hard = [(hard_A[i], hard_b[i]) for i in range(4)]
    for _ in range(10):
        w = rng.uniform(0.5, 5.0, size=2)
        ctrl = RelaxedQpController(2.0 * np.eye(2), w, penalty=penalty,
                                   hard_A=hard_A, hard_b=hard_b)
        q = rng.normal(size=(1, 2))
        A = rng.normal(size=(1, 2, 2))
        b = rng.normal(size=(1, 2))
        sol = ctrl.solve_batch(q, A, b)
        kind = "linear" if penalty == "linear" else "quad"
        soft = [(A[0, i], b[0, i], w[i], kind) for i in range(2)]
        val, _ = qp_grid_oracle(2.0 * np.eye(2), q[0], hard, soft,
                                lo=np.full(2, -2.0), hi=np.full(2, 2.0))
        got = qp_objective(sol.u[0], 2.0 * np.eye(2), q[0], soft)
        assert got <= val + 1e-6


@pytest.mark.parametrize("penalty", ["linear", "quad"])
def test_layer_gradients_match_fd(penalty):
    rng = _rng(11)
    n, ms, B = 2, 2, 3
    hard_A, hard_b = box_rows(3.0, n)
    for trial in range(12):
        w = rng.uniform(0.5, 4.0, size=ms)
        ctrl = RelaxedQpController(2.0 * np.eye(n), w, penalty=penalty,
                                   hard_A=hard_A, hard_b=hard_b)
        q0 = rng.normal(size=(B, n))
        A0 = rng.normal(size=(B, ms, n))
        b0 = rng.normal(size=(B, ms))
        cu = rng.normal(size=(B, n))
        cr = rng.normal(size=(B, ms))

        def loss_np(q, A, b):
            s = ctrl.solve_batch(q.reshape(B, n), A.reshape(B, ms, n),
                                 b.reshape(B, ms))
            return float((cu * s.u).sum() + (cr * s.relaxation).sum())

        tape = Tape()
        qt = tape.watch(q0)
        At = tape.watch(A0)
        bt = tape.watch(b0)
        u, r = ctrl.layer(qt, At, bt)
        loss = (as_tensor(cu) * u).sum() + (as_tensor(cr) * r).sum()
        gq, gA, gb = tape.backward(loss, [qt, At, bt])
        fq = fd_grad(lambda v: loss_np(v, A0, b0), q0.ravel()).reshape(B, n)
        fA = fd_grad(lambda v: loss_np(q0.ravel(), v, b0),
                     A0.ravel()).reshape(B, ms, n)
        fb = fd_grad(lambda v: loss_np(q0.ravel(), A0.ravel(), v),
                     b0.ravel()).reshape(B, ms)
        for g, f in ((gq, fq), (gA, fA), (gb, fb)):
            assert np.abs(g - f).max() / max(1.0, np.abs(f).max()) < 1e-6


def test_layer_constant_inputs_stay_untaped():
    ctrl = RelaxedQpController(2.0 * np.eye(1), [1.0])
    u, r = ctrl.layer(np.zeros((2, 1)), np.ones((2, 1, 1)), np.ones((2, 1)))
    assert u.tape is None and r.tape is None


def test_solve_single_wrapper():
    ctrl = RelaxedQpController(2.0 * np.eye(1), [3.0])
    sol = ctrl.solve(np.zeros(1), np.array([[1.0]]), np.array([-1.0]))
    assert sol.u.shape == (1,)
    assert sol.u[0] == pytest.approx(-1.0)


# -- policies ------------------------------------------------------------------


@pytest.fixture
def pendulum_clf():
    rng = _rng(3)
    system = pendulum(torque_max=8.0)
    fm = FeatureMap(2, angular_dims=(0,))
    net = Mlp((3, 16, 4), "tanh", rng=rng)
    cert = NormSquaredCertificate(net, goal=np.array([np.pi, 0.0]), features=fm)
    return system, cert


def test_clf_policy_respects_box_and_accounts_violation(pendulum_clf):
    system, cert = pendulum_clf
    pol = ClfQpPolicy(cert, system, c=1.0, relax_weight=1e3, u_max=8.0)
    x = _rng(1).normal(size=(12, 2)) + np.array([np.pi, 0.0])
    out = pol.detail(x)
    assert np.all(np.abs(out.u) <= 8.0 + 1e-9)
    _, res = clf_residuals(cert, system, x, out.u, c=1.0)
    # whatever decrease the QP could not buy shows up in the relaxation
    assert np.all(res <= out.relaxation + 1e-7)


def test_clf_policy_param_gradients_match_fd(pendulum_clf):
    system, cert = pendulum_clf
    net = cert.net
    pol = ClfQpPolicy(cert, system, u_max=8.0)
    x = _rng(2).normal(size=(5, 2)) + np.array([np.pi, 0.0])
    tape = Tape()
    pairs, leaves = net.watch_params(tape)
    u_t, r_t, V_t = pol.layer(x, pairs)
    loss = r_t.sum() + u_t.square().sum() + V_t.sum()
    grads = tape.backward(loss, leaves)
    W0 = net.weights[0].copy()

    def loss_np(wflat):
        net.weights[0][:] = wflat.reshape(W0.shape)
        o = pol.detail(x)
        net.weights[0][:] = W0
        return float(o.relaxation.sum() + (o.u ** 2).sum()
                     + o.cert_value.sum())

    num = fd_grad(loss_np, W0.ravel(), h=1e-6).reshape(W0.shape)
    assert np.abs(grads[0] - num).max() / max(1.0, np.abs(num).max()) < 1e-4


def test_cbf_policy_filters_nominal(pendulum_clf):
    system, _ = pendulum_clf
    rng = _rng(7)
    bnet = Mlp((2, 8, 1), "tanh", rng=rng)
    bar = ScalarCertificate(bnet, dim=2)
    nominal = lambda s: np.full((s.shape[0], 1), 0.3)
    pol = CbfQpPolicy(bar, system, gamma=0.1, u_max=8.0, u_nom=nominal)
    x = rng.normal(size=(9, 2))
    out = pol.detail(x)
    assert out.u.shape == (9, 1)
    assert np.all(np.abs(out.u) <= 8.0 + 1e-9)
    _, res = cbf_residuals(bar, system, x, out.u, gamma=0.1)
    assert np.all(res <= out.relaxation + 1e-6)


def test_clf_cbf_policy_combines_rows(pendulum_clf):
    system, cert = pendulum_clf
    bnet = Mlp((2, 8, 1), "tanh", rng=_rng(9))
    bar = ScalarCertificate(bnet, dim=2)
    pol = ClfCbfQpPolicy(cert, bar, system, u_max=8.0)
    x = _rng(4).normal(size=(6, 2))
    out = pol.detail(x)
    assert out.u.shape == (6, 1)
    assert np.all(np.abs(out.u) <= 8.0 + 1e-9)


def test_linear_feedback_clips():
    K = np.array([[2.0, 1.0]])
    lin = LinearStateFeedback(K, goal=np.array([np.pi, 0.0]), u_max=5.0)
    x = _rng(5).normal(size=(8, 2)) * 3.0
    u = lin(x)
    want = np.clip(-(x - np.array([np.pi, 0.0])) @ K.T, -5.0, 5.0)
    assert np.allclose(u, want)
    J = lin.jacobian(x)
    assert J.shape == (8, 1, 2)
    assert np.allclose(J, -K)


def test_box_rows_validation():
    with pytest.raises(ValueError):
        box_rows(-1.0, 2)
    A, b = box_rows([1.0, 2.0], 2)
    assert A.shape == (4, 2)
    assert b.tolist() == [1.0, 2.0, 1.0, 2.0]


def test_tracking_controller_zero_error_returns_reference():
    rng = _rng(6)
    fm = FeatureMap(2, angular_dims=(0,))
    tnet = Mlp((5, 16, 1), "tanh", rng=rng)
    trk = TrackingController(tnet, fm, state_dim=2)
    x = rng.normal(size=(7, 2))
    u_ref = rng.normal(size=(7, 1))
    u = trk(x, np.zeros((7, 2)), u_ref)
    assert np.allclose(u, u_ref)


def test_tracking_controller_error_jacobian_matches_fd():
    rng = _rng(8)
    fm = FeatureMap(2, angular_dims=(0,))
    tnet = Mlp((5, 16, 1), "tanh", rng=rng)
    trk = TrackingController(tnet, fm, state_dim=2)
    x = rng.normal(size=(4, 2))
    e = rng.normal(size=(4, 2)) * 0.3
    J = trk.error_jacobian(x, e)
    for i in range(4):
        num = fd_grad(lambda v: trk.correction(x[i][None], v[None])[0, 0], e[i])
        assert np.abs(J[i, 0] - num).max() < 1e-6
