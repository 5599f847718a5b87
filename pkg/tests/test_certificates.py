import numpy as np
import pytest

from neuralcert.certificates import (
    FeatureMap,
    MetricCertificate,
    NormSquaredCertificate,
    QuadraticCertificate,
    ScalarCertificate,
    cbf_residuals,
    clf_residuals,
    contraction_residuals,
    lie_derivatives,
)
from neuralcert.diff.mlp import Mlp, forward
from neuralcert.diff.tensor import Tape, as_tensor
from neuralcert.dynamics import pendulum, kinematic_car

from oracles import fd_grad


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- feature map -------------------------------------------------------------


def test_feature_map_identity_without_angles():
    fm = FeatureMap(3)
    x = _rng().normal(size=(4, 3))
    assert fm(x) is x
    assert fm.out_dim == 3


def test_feature_map_layout():
    # linear dims keep their order up front, pairs follow in dim order
    fm = FeatureMap(4, angular_dims=(2, 0))
    assert fm.out_dim == 6
    x = _rng(1).normal(size=(5, 4))
    y = fm(x)
    want = np.stack([x[:, 1], x[:, 3],
                     np.sin(x[:, 0]), np.cos(x[:, 0]),
                     np.sin(x[:, 2]), np.cos(x[:, 2])], axis=-1)
    assert np.allclose(y, want)


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(2, angular_dims=(0, 0))
    with pytest.raises(ValueError):
        FeatureMap(2, angular_dims=(5,))


def test_feature_map_interval_sound():
    fm = FeatureMap(2, angular_dims=(0,))
    rng = _rng(2)
    lo = rng.normal(size=(6, 2)) * 2.0
    hi = lo + rng.uniform(0.0, 3.0, size=(6, 2))
    flo, fhi = fm.interval((lo, hi))
    for _ in range(200):
        x = rng.uniform(lo, hi)
        y = fm(x)
        assert np.all(y >= flo - 1e-12) and np.all(y <= fhi + 1e-12)


def test_feature_map_jacobian_interval_sound():
    fm = FeatureMap(3, angular_dims=(1,))
    rng = _rng(3)
    lo = rng.normal(size=(3,))
    hi = lo + rng.uniform(0.1, 1.5, size=3)
    jlo, jhi = fm.jacobian_interval((lo[None], hi[None]))
    assert jlo.shape == (1, 3, 4)
    h = 1e-6
    for _ in range(60):
        x = rng.uniform(lo, hi)[None]
        J = np.zeros((3, 4))
        for i in range(3):
            xp = x.copy(); xp[0, i] += h
            xm = x.copy(); xm[0, i] -= h
            J[i] = (fm(xp)[0] - fm(xm)[0]) / (2.0 * h)
        assert np.all(J >= jlo[0] - 1e-8) and np.all(J <= jhi[0] + 1e-8)


# -- norm-squared certificate --------------------------------------------------


@pytest.fixture
def clf_setup():
    rng = _rng(4)
    fm = FeatureMap(2, angular_dims=(0,))
    net = Mlp((3, 16, 4), "tanh", rng=rng)
    goal = np.array([np.pi, 0.0])
    return NormSquaredCertificate(net, goal, features=fm)


def test_norm_squared_nonnegative_and_zero_at_goal(clf_setup):
    cert = clf_setup
    x = _rng(5).normal(size=(50, 2)) * 3.0
    V = cert(x)
    assert V.shape == (50,)
    assert np.all(V >= 0.0)
    assert cert(np.array([[np.pi, 0.0]]))[0] == 0.0


def test_norm_squared_rejects_unbatched(clf_setup):
    with pytest.raises(ValueError):
        clf_setup(np.zeros(2))
    with pytest.raises(ValueError):
        clf_setup(np.zeros((3, 5)))


def test_norm_squared_validation():
    net = Mlp((3, 4, 2), "tanh", rng=_rng())
    with pytest.raises(ValueError):
        NormSquaredCertificate(net, np.zeros(2))  # identity features feed 2 into 3
    fm = FeatureMap(2, angular_dims=(0,))
    with pytest.raises(ValueError):
        NormSquaredCertificate(net, np.zeros(3), features=fm)


def test_norm_squared_gradient_matches_fd(clf_setup):
    cert = clf_setup
    x = _rng(6).normal(size=(5, 2))
    G = cert.gradient(x)
    assert G.shape == (5, 2)
    for i in range(5):
        num = fd_grad(lambda v: cert(v[None])[0], x[i])
        assert np.abs(G[i] - num).max() < 1e-6


def test_norm_squared_params_path_matches_numpy(clf_setup):
    cert = clf_setup
    x = _rng(7).normal(size=(4, 2))
    tape = Tape()
    pairs, _ = cert.net.watch_params(tape)
    V_t = cert(as_tensor(x), params=pairs)
    assert np.allclose(V_t.data, cert(x), atol=1e-12)


def test_norm_squared_value_bounds_sound(clf_setup):
    cert = clf_setup
    rng = _rng(8)
    lo = rng.normal(size=(4, 2))
    hi = lo + rng.uniform(0.0, 1.0, size=(4, 2))
    vlo, vhi = cert.value_bounds((lo, hi))
    assert np.all(vlo >= -1e-12)  # squared form keeps the floor at zero
    for _ in range(300):
        x = rng.uniform(lo, hi)
        V = cert(x)
        assert np.all(V >= vlo - 1e-10) and np.all(V <= vhi + 1e-10)


def test_norm_squared_gradient_bounds_sound(clf_setup):
    cert = clf_setup
    rng = _rng(9)
    lo = rng.normal(size=(3, 2))
    hi = lo + rng.uniform(0.0, 0.8, size=(3, 2))
    glo, ghi = cert.gradient_bounds((lo, hi))
    assert glo.shape == (3, 2)
    for _ in range(200):
        x = rng.uniform(lo, hi)
        G = cert.gradient(x)
        assert np.all(G >= glo - 1e-9) and np.all(G <= ghi + 1e-9)


def test_norm_squared_bounds_tight_on_degenerate_box(clf_setup):
    cert = clf_setup
    x = _rng(10).normal(size=(5, 2))
    vlo, vhi = cert.value_bounds((x, x))
    assert np.allclose(vlo, cert(x), atol=1e-10)
    assert np.allclose(vhi, cert(x), atol=1e-10)
    glo, ghi = cert.gradient_bounds((x, x))
    G = cert.gradient(x)
    assert np.allclose(glo, G, atol=1e-9)
    assert np.allclose(ghi, G, atol=1e-9)


# -- scalar certificate ----------------------------------------------------------


def test_scalar_certificate_matches_network():
    net = Mlp((2, 8, 1), "tanh", rng=_rng(11))
    bar = ScalarCertificate(net, dim=2)
    x = _rng(12).normal(size=(7, 2))
    assert np.allclose(bar(x), forward(net, x)[:, 0])
    with pytest.raises(ValueError):
        ScalarCertificate(Mlp((2, 4, 2), "tanh", rng=_rng()), dim=2)
    with pytest.raises(ValueError):
        ScalarCertificate(net)


def test_scalar_certificate_gradient_and_bounds():
    net = Mlp((2, 8, 1), "tanh", rng=_rng(13))
    bar = ScalarCertificate(net, dim=2)
    rng = _rng(14)
    x = rng.normal(size=(4, 2))
    G = bar.gradient(x)
    for i in range(4):
        num = fd_grad(lambda v: bar(v[None])[0], x[i])
        assert np.abs(G[i] - num).max() < 1e-6
    lo = x - 0.3
    hi = x + 0.3
    vlo, vhi = bar.value_bounds((lo, hi))
    glo, ghi = bar.gradient_bounds((lo, hi))
    for _ in range(200):
        s = rng.uniform(lo, hi)
        assert np.all(bar(s) >= vlo - 1e-10) and np.all(bar(s) <= vhi + 1e-10)
        Gs = bar.gradient(s)
        assert np.all(Gs >= glo - 1e-9) and np.all(Gs <= ghi + 1e-9)


# -- quadratic baseline ----------------------------------------------------------


def test_quadratic_certificate_exact():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    goal = np.array([1.0, -1.0])
    cert = QuadraticCertificate(P, goal)
    x = _rng(15).normal(size=(6, 2))
    d = x - goal
    assert np.allclose(cert(x), np.einsum("bi,ij,bj->b", d, P, d))
    assert np.allclose(cert.gradient(x), 2.0 * d @ P)
    with pytest.raises(ValueError):
        QuadraticCertificate(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        QuadraticCertificate(-np.eye(2))


def test_quadratic_certificate_bounds_sound():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    cert = QuadraticCertificate(P, np.array([0.5, 0.0]))
    rng = _rng(16)
    lo = rng.normal(size=(3, 2))
    hi = lo + rng.uniform(0.0, 2.0, size=(3, 2))
    vlo, vhi = cert.value_bounds((lo, hi))
    glo, ghi = cert.gradient_bounds((lo, hi))
    for _ in range(300):
        x = rng.uniform(lo, hi)
        V = cert(x)
        G = cert.gradient(x)
        assert np.all(V >= vlo - 1e-10) and np.all(V <= vhi + 1e-10)
        assert np.all(G >= glo - 1e-10) and np.all(G <= ghi + 1e-10)


# -- metric certificate ----------------------------------------------------------


def test_metric_certificate_symmetric_with_shift():
    n = 3
    net = Mlp((n, 8, n * n), "tanh", rng=_rng(17))
    met = MetricCertificate(net, dim=n, shift=0.5)
    x = _rng(18).normal(size=(5, n))
    M = met(x)
    assert M.shape == (5, n, n)
    assert np.allclose(M, np.swapaxes(M, -1, -2))
    A = forward(net, x).reshape(-1, n, n)
    assert np.allclose(M, A + np.swapaxes(A, -1, -2) + 0.5 * np.eye(n))
    with pytest.raises(ValueError):
        MetricCertificate(Mlp((n, 4, 5), "tanh", rng=_rng()), dim=n)


def test_metric_certificate_params_path():
    n = 2
    net = Mlp((n, 8, n * n), "tanh", rng=_rng(19))
    met = MetricCertificate(net, dim=n, shift=0.1)
    x = _rng(20).normal(size=(3, n))
    tape = Tape()
    pairs, _ = net.watch_params(tape)
    M_t = met.matrix(as_tensor(x), params=pairs)
    assert np.allclose(M_t.data, met(x), atol=1e-12)


# -- Lie derivatives and residuals -------------------------------------------------


def test_lie_derivatives_match_fd_directional(clf_setup):
    cert = clf_setup
    system = pendulum()
    x = _rng(21).normal(size=(6, 2))
    V, LfV, LgV = lie_derivatives(cert, system, x)
    assert LgV.shape == (6, 1)
    assert np.allclose(V, cert(x))
    f = system.f(x)
    g = system.g(x)
    h = 1e-6
    for i in range(6):
        dfd = (cert(x[i][None] + h * f[i]) - cert(x[i][None] - h * f[i])) / (2 * h)
        assert abs(LfV[i] - dfd[0]) < 1e-6
        dgd = (cert(x[i][None] + h * g[i, :, 0]) - cert(x[i][None] - h * g[i, :, 0])) / (2 * h)
        assert abs(LgV[i, 0] - dgd[0]) < 1e-6


def test_lie_derivatives_multi_input():
    system = kinematic_car()
    net = Mlp((4, 8, 1), "tanh", rng=_rng(22))
    fm = FeatureMap(3, angular_dims=(2,))
    bar = ScalarCertificate(net, features=fm)
    x = _rng(23).normal(size=(4, 3))
    V, LfV, LgV = lie_derivatives(bar, system, x)
    assert LgV.shape == (4, 2)
    # zero drift: LfV vanishes identically for the car
    assert np.abs(LfV).max() < 1e-14
    G = bar.gradient(x)
    want = np.einsum("bn,bnm->bm", G, system.g(x))
    assert np.allclose(LgV, want, atol=1e-10)


def test_lie_derivatives_taped_params_grad(clf_setup):
    cert = clf_setup
    system = pendulum()
    x = _rng(24).normal(size=(3, 2))
    tape = Tape()
    pairs, leaves = cert.net.watch_params(tape)
    V, LfV, LgV = lie_derivatives(cert, system, x, params=pairs)
    loss = V.sum() + LfV.sum() + LgV.sum()
    grads = tape.backward(loss, leaves)
    W0 = cert.net.weights[0].copy()

    def loss_np(wflat):
        cert.net.weights[0][:] = wflat.reshape(W0.shape)
        Vn, Lf, Lg = lie_derivatives(cert, system, x)
        cert.net.weights[0][:] = W0
        return float(Vn.sum() + Lf.sum() + Lg.sum())

    num = fd_grad(loss_np, W0.ravel(), h=1e-6).reshape(W0.shape)
    assert np.abs(grads[0] - num).max() / max(1.0, np.abs(num).max()) < 1e-5


def test_clf_residuals_consistent(clf_setup):
    cert = clf_setup
    system = pendulum()
    rng = _rng(25)
    x = rng.normal(size=(5, 2))
    u = rng.normal(size=(5, 1))
    V, res = clf_residuals(cert, system, x, u, c=1.0)
    Vl, LfV, LgV = lie_derivatives(cert, system, x)
    assert np.allclose(V, Vl)
    assert np.allclose(res, LfV + (LgV * u).sum(axis=-1) + V, atol=1e-10)


def test_cbf_residuals_consistent():
    system = pendulum()
    net = Mlp((2, 8, 1), "tanh", rng=_rng(26))
    bar = ScalarCertificate(net, dim=2)
    rng = _rng(27)
    x = rng.normal(size=(5, 2))
    u = rng.normal(size=(5, 1))
    h, res = cbf_residuals(bar, system, x, u, gamma=0.1)
    hl, Lfh, Lgh = lie_derivatives(bar, system, x)
    assert np.allclose(res, Lfh + (Lgh * u).sum(axis=-1) + 0.1 * h, atol=1e-10)


def test_contraction_residuals_formula():
    n = 2
    system = pendulum()
    net = Mlp((n, 8, n * n), "tanh", rng=_rng(28))
    met = MetricCertificate(net, dim=n, shift=1.0)
    rng = _rng(29)
    x = rng.normal(size=(4, n))
    u = rng.normal(size=(4, 1))
    J = rng.normal(size=(4, n, n))
    M, C = contraction_residuals(met, system, x, u, J, lam=1.0)
    assert np.allclose(C, np.swapaxes(C, -1, -2), atol=1e-12)
    # independent reconstruction of Mdot by finite differences along xdot
    xd = system.xdot(x, u)
    h = 1e-6
    Md = (met(x + h * xd) - met(x - h * xd)) / (2 * h)
    want = Md + np.swapaxes(J, -1, -2) @ M + M @ J + 2.0 * M
    assert np.abs(C - want).max() < 1e-5


def test_contraction_residuals_taped_matches_numpy():
    n = 2
    system = pendulum()
    net = Mlp((n, 8, n * n), "tanh", rng=_rng(30))
    met = MetricCertificate(net, dim=n, shift=1.0)
    rng = _rng(31)
    x = rng.normal(size=(3, n))
    u = rng.normal(size=(3, 1))
    J = rng.normal(size=(3, n, n))
    M0, C0 = contraction_residuals(met, system, x, u, J)
    tape = Tape()
    pairs, _ = net.watch_params(tape)
    M1, C1 = contraction_residuals(met, system, x, u, J, params=pairs)
    assert np.allclose(M1.data, M0, atol=1e-12)
    assert np.allclose(C1.data, C0, atol=1e-12)
