"""QP kernel tests: hand-checkable cases, KKT certificates on random
problems, agreement with a dense grid-search oracle, and bit-identity
between the compiled and pure backends.
"""

import numpy as np
import pytest

from neuralcert._core import (
    BACKEND,
    INFEASIBLE,
    ITER_LIMIT,
    OPTIMAL,
    qp_py,
    qp_solve,
    qp_solve_batch,
)

from oracles import qp_grid_oracle, qp_objective

try:
    from neuralcert._core import qp_c
except ImportError:
    qp_c = None


def _rng(seed=0):
    return np.random.default_rng(seed)


def _random_qp(rng, n_lo=1, n_hi=6, m_hi=9, spd_floor=0.3, feasible=True):
    n = int(rng.integers(n_lo, n_hi))
    m = int(rng.integers(0, m_hi))
    A = rng.normal(size=(n, n))
    H = A @ A.T + np.eye(n) * spd_floor
    q = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    slack_lo = 0.0 if feasible else -0.3
    h = (G @ x0 if m else np.zeros(0)) + rng.uniform(slack_lo, 1.0, size=m)
    return H, q, G, h


# -- hand cases --------------------------------------------------------------


def test_unconstrained_optimum():
    u, lam, active, status, _ = qp_solve(np.eye(2), np.array([-1.0, -2.0]),
                                         np.zeros((0, 2)), np.zeros(0))
    assert status == OPTIMAL
    assert u == pytest.approx([1.0, 2.0])
    assert lam.shape == (0,)


def test_single_row_clip():
    # min 0.5(u-3)^2 s.t. u <= 1: optimum at the bound with multiplier 2
    u, lam, active, status, _ = qp_solve(np.eye(1), np.array([-3.0]),
                                         np.array([[1.0]]), np.array([1.0]))
    assert status == OPTIMAL
    assert u == pytest.approx([1.0])
    assert lam == pytest.approx([2.0])
    assert active.tolist() == [1]


def test_inactive_row_leaves_optimum_alone():
    u, lam, active, status, _ = qp_solve(np.eye(1), np.array([-0.5]),
                                         np.array([[1.0]]), np.array([1.0]))
    assert status == OPTIMAL
    assert u == pytest.approx([0.5])
    assert lam == pytest.approx([0.0])
    assert active.tolist() == [0]


def test_triangle_vertex():
    # pull toward (2,2); the diagonal cut u0+u1 <= 1.5 binds alone
    H = np.eye(2)
    q = np.array([-2.0, -2.0])
    G = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    h = np.array([1.0, 1.0, 1.5])
    u, lam, active, status, _ = qp_solve(H, q, G, h)
    assert status == OPTIMAL
    assert u == pytest.approx([0.75, 0.75])
    assert lam == pytest.approx([0.0, 0.0, 1.25])
    assert active.tolist() == [0, 0, 1]


def test_two_rows_meet_at_corner():
    # both box faces bind; multipliers from stationarity u - (2,3) + lam = 0
    H = np.eye(2)
    q = np.array([-2.0, -3.0])
    G = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([1.0, 1.0])
    u, lam, active, status, _ = qp_solve(H, q, G, h)
    assert status == OPTIMAL
    assert u == pytest.approx([1.0, 1.0])
    assert lam == pytest.approx([1.0, 2.0])


def test_infeasible_detected():
    G = np.array([[1.0], [-1.0]])
    h = np.array([0.0, -1.0])  # u <= 0 and u >= 1
    _, _, _, status, _ = qp_solve(np.eye(1), np.zeros(1), G, h)
    assert status == INFEASIBLE


def test_iteration_limit_status():
    rng = _rng(1)
    H, q, G, h = _random_qp(rng, n_lo=3, n_hi=4, m_hi=8)
    _, _, _, status, iters = qp_solve(H, q, G, h, max_iter=1)
    assert status in (OPTIMAL, ITER_LIMIT)
    if status == ITER_LIMIT:
        assert iters > 1


def test_nonspd_h_raises():
    with pytest.raises(ValueError):
        qp_solve(-np.eye(2), np.zeros(2), np.zeros((0, 2)), np.zeros(0))


def test_duplicate_rows_share_optimum():
    # duplicated constraint must not confuse the working set
    H = np.eye(2)
    q = np.array([-2.0, 0.0])
    G = np.array([[1.0, 0.0], [1.0, 0.0]])
    h = np.array([1.0, 1.0])
    u, lam, active, status, _ = qp_solve(H, q, G, h)
    assert status == OPTIMAL
    assert u == pytest.approx([1.0, 0.0])
    # total push equals the single-row multiplier
    assert lam.sum() == pytest.approx(1.0)


# -- randomized optimality certificates ----------------------------------------


def test_kkt_certificate_battery():
    rng = _rng(7)
    for _ in range(300):
        H, q, G, h = _random_qp(rng)
        m = h.shape[0]
        u, lam, active, status, _ = qp_solve(H, q, G, h, max_iter=500)
        assert status == OPTIMAL
        stat = H @ u + q + (G.T @ lam if m else 0.0)
        assert np.abs(stat).max() < 1e-8
        if m:
            res = G @ u - h
            assert res.max() < 1e-8          # primal feasibility
            assert lam.min() >= -1e-12       # dual feasibility
            assert np.abs(lam * res).max() < 1e-8  # complementarity
            assert np.all(lam[active == 0] == 0.0)


def test_degenerate_duplicated_rows_battery():
    rng = _rng(11)
    for _ in range(150):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 6))
        A = rng.normal(size=(n, n))
        H = A @ A.T + np.eye(n) * 1e-3
        q = rng.normal(size=n)
        G = rng.normal(size=(m, n))
        G = np.vstack([G, G[: max(1, m // 2)]])
        x0 = rng.normal(size=n)
        h = G @ x0 + rng.uniform(0.0, 0.5, size=G.shape[0])
        u, lam, active, status, _ = qp_solve(H, q, G, h, max_iter=800)
        assert status == OPTIMAL
        assert np.abs(H @ u + q + G.T @ lam).max() < 1e-6
        assert (G @ u - h).max() < 1e-6
        assert lam.min() >= -1e-10


def test_matches_grid_oracle():
    rng = _rng(13)
    for _ in range(12):
        n = 2
        A = rng.normal(size=(n, n))
        H = A @ A.T + np.eye(n)
        q = rng.normal(size=n)
        m = int(rng.integers(1, 4))
        G = rng.normal(size=(m, n))
        h = G @ rng.normal(size=n) + rng.uniform(0.0, 1.0, size=m)
        u, _, _, status, _ = qp_solve(H, q, G, h)
        assert status == OPTIMAL
        hard = [(G[i], h[i]) for i in range(m)]
        val, u_ref = qp_grid_oracle(H, q, hard, [], lo=u - 2.0, hi=u + 2.0)
        assert u_ref is not None
        got = qp_objective(u, H, q, [])
        assert got <= val + 1e-6
        assert np.abs(u - u_ref).max() < 1e-3


# -- batch and backend agreement -------------------------------------------------


def test_batch_matches_single():
    rng = _rng(17)
    B, n, m = 64, 3, 5
    Hb = np.repeat((2.0 * np.eye(n))[None], B, axis=0)
    qb = rng.normal(size=(B, n))
    Gb = rng.normal(size=(B, m, n))
    hb = np.einsum("bmn,bn->bm", Gb, rng.normal(size=(B, n))) + rng.uniform(
        0.0, 1.0, size=(B, m))
    U, Lam, Active, Status, Iters = qp_solve_batch(Hb, qb, Gb, hb)
    assert Status.max() == OPTIMAL
    for b in range(B):
        u, lam, active, status, _ = qp_solve(Hb[b], qb[b], Gb[b], hb[b])
        assert np.array_equal(U[b], u)
        assert np.array_equal(Lam[b], lam)
        assert np.array_equal(Active[b], active)


@pytest.mark.skipif(qp_c is None, reason="compiled kernel not built")
def test_backends_bit_identical():
    rng = _rng(42)
    checked = 0
    for _ in range(400):
        H, q, G, h = _random_qp(rng, feasible=False)
        rc = qp_c.solve(H, q, G, h, tol=1e-10, max_iter=500)
        rp = qp_py.solve(H, q, G, h, tol=1e-10, max_iter=500)
        assert np.array_equal(rc[0], rp[0])
        assert np.array_equal(rc[1], rp[1])
        assert np.array_equal(rc[2], rp[2])
        assert rc[3] == rp[3] and rc[4] == rp[4]
        checked += 1
    assert checked == 400


@pytest.mark.skipif(qp_c is None, reason="compiled kernel not built")
def test_backend_reports_compiled_when_available():
    import os

    if os.environ.get("NEURALCERT_PURE", "") in ("", "0"):
        assert BACKEND == "compiled"
