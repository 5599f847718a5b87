"""Pure-Python dual active-set QP kernel.

Solves   min_u  0.5 u'Hu + q'u   s.t.  G u <= h   with H symmetric positive
definite, by the dual active-set method: start at the unconstrained optimum,
repeatedly pick the lowest-index violated row, and take primal/dual steps
that keep the working-set constraints tight and the multipliers nonnegative
until the row becomes feasible or the problem is found infeasible.

This module is the reference twin of the compiled kernel in qp_c.pyx. The
two are kept line-for-line parallel in the solve loop, with scalar indexing
and a hand-rolled Cholesky, so that both backends produce bit-identical
results (the extension is compiled with FP contraction off). Vectorized
numpy is deliberately avoided here; do not "optimize" this file without
mirroring the change in the .pyx twin.
"""

import math

import numpy as np

OPTIMAL = 0
INFEASIBLE = 1
ITER_LIMIT = 2
FACTOR_FAIL = 3


def _chol_factor(A, L, n):
    # lower-triangular L with A = L L', returns 0 on success
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s = s - L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return 1
                L[i, j] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return 0


def _chol_solve(L, b, x, n):
    # solve L L' x = b via forward then back substitution
    for i in range(n):
        s = b[i]
        for k in range(i):
            s = s - L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s = s - L[k, i] * x[k]
        x[i] = s / L[i, i]


def _refactor(Lh, G, act, na, n, Y, S, Ls, tmp):
    """Rebuild Y = H^-1 N' and the Cholesky factor of S = N H^-1 N'."""
    for j in range(na):
        for i in range(n):
            tmp[i] = G[act[j], i]
        _chol_solve(Lh, tmp, tmp, n)
        for i in range(n):
            Y[i, j] = tmp[i]
    for i in range(na):
        for j in range(na):
            s = 0.0
            for k in range(n):
                s = s + G[act[i], k] * Y[k, j]
            S[i, j] = s
    return _chol_factor(S, Ls, na)


def solve(H, q, G, h, tol=1e-10, max_iter=200):
    """Solve one QP. Returns (u, lam, active, status, iters).

    lam holds the multiplier for every row (zero when inactive), active is
    a uint8 mask over rows, status is one of the module-level codes.
    """
    H = np.ascontiguousarray(H, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    G = np.ascontiguousarray(G, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    n = q.shape[0]
    m = h.shape[0]
    u = np.zeros(n)
    lam = np.zeros(m)
    active = np.zeros(m, dtype=np.uint8)
    Lh = np.zeros((n, n))
    Y = np.zeros((n, m))
    S = np.zeros((m, m))
    Ls = np.zeros((m, m))
    act = np.zeros(m, dtype=np.int64)
    lam_act = np.zeros(m)
    r = np.zeros(m)
    z = np.zeros(n)
    w1 = np.zeros(n)
    tmp = np.zeros(max(n, m) if m > 0 else n)
    status, iters = _solve_into(H, q, G, h, tol, max_iter, n, m,
                                u, lam, active, Lh, Y, S, Ls,
                                act, lam_act, r, z, w1, tmp)
    if status == FACTOR_FAIL:
        raise ValueError("H is not positive definite")
    return u, lam, active, status, iters


def _solve_into(H, q, G, h, tol, max_iter, n, m,
                u, lam, active, Lh, Y, S, Ls, act, lam_act, r, z, w1, tmp):
    if _chol_factor(H, Lh, n) != 0:
        return FACTOR_FAIL, 0
    # unconstrained optimum u = -H^-1 q
    for i in range(n):
        tmp[i] = -q[i]
    _chol_solve(Lh, tmp, u, n)
    na = 0
    iters = 0
    while True:
        # lowest-index violated row not already in the working set
        p = -1
        vp = 0.0
        for i in range(m):
            if active[i] != 0:
                continue
            v = -h[i]
            for k in range(n):
                v = v + G[i, k] * u[k]
            if v > tol:
                p = i
                vp = v
                break
        if p < 0:
            for i in range(m):
                lam[i] = 0.0
            for j in range(na):
                lam[act[j]] = lam_act[j]
            return OPTIMAL, iters
        lam_p = 0.0
        while True:
            iters = iters + 1
            if iters > max_iter:
                return ITER_LIMIT, iters
            # z = H^-1 (g_p - N' r),  r = S^-1 N H^-1 g_p
            for i in range(n):
                tmp[i] = G[p, i]
            _chol_solve(Lh, tmp, w1, n)
            if na > 0:
                for i in range(na):
                    s = 0.0
                    for k in range(n):
                        s = s + G[act[i], k] * w1[k]
                    tmp[i] = s
                _chol_solve(Ls, tmp, r, na)
                for i in range(n):
                    s = w1[i]
                    for j in range(na):
                        s = s - Y[i, j] * r[j]
                    z[i] = s
            else:
                for i in range(n):
                    z[i] = w1[i]
            zz = 0.0
            for i in range(n):
                zz = zz + z[i] * z[i]
            if zz <= tol:
                # g_p lies in the span of the working set: dual-only step
                t2 = math.inf
                kdrop = -1
                for j in range(na):
                    if r[j] > tol:
                        cand = lam_act[j] / r[j]
                        if cand < t2:
                            t2 = cand
                            kdrop = j
                if kdrop < 0:
                    return INFEASIBLE, iters
                for j in range(na):
                    lam_act[j] = lam_act[j] - t2 * r[j]
                lam_p = lam_p + t2
                active[act[kdrop]] = 0
                for j in range(kdrop, na - 1):
                    act[j] = act[j + 1]
                    lam_act[j] = lam_act[j + 1]
                na = na - 1
                if _refactor(Lh, G, act, na, n, Y, S, Ls, tmp) != 0:
                    return FACTOR_FAIL, iters
                continue
            gz = 0.0
            for k in range(n):
                gz = gz + G[p, k] * z[k]
            t1 = vp / gz
            t2 = math.inf
            kdrop = -1
            for j in range(na):
                if r[j] > tol:
                    cand = lam_act[j] / r[j]
                    if cand < t2:
                        t2 = cand
                        kdrop = j
            if t2 < t1:
                t = t2
            else:
                t = t1
            for i in range(n):
                u[i] = u[i] - t * z[i]
            for j in range(na):
                lam_act[j] = lam_act[j] - t * r[j]
            lam_p = lam_p + t
            if t2 < t1:
                # a working-set multiplier hit zero first: drop that row
                active[act[kdrop]] = 0
                for j in range(kdrop, na - 1):
                    act[j] = act[j + 1]
                    lam_act[j] = lam_act[j + 1]
                na = na - 1
                if _refactor(Lh, G, act, na, n, Y, S, Ls, tmp) != 0:
                    return FACTOR_FAIL, iters
                vp = -h[p]
                for k in range(n):
                    vp = vp + G[p, k] * u[k]
                if vp > tol:
                    continue
                # row p became tight at the partial step; it must still
                # enter the working set carrying its accumulated multiplier
            # full step: row p joins the working set
            act[na] = p
            lam_act[na] = lam_p
            na = na + 1
            active[p] = 1
            if _refactor(Lh, G, act, na, n, Y, S, Ls, tmp) != 0:
                return FACTOR_FAIL, iters
            break


def solve_batch(H, q, G, h, tol=1e-10, max_iter=200):
    """Solve a batch of QPs with shared shapes.

    H (B,n,n), q (B,n), G (B,m,n), h (B,m). Returns stacked outputs of
    solve() plus per-sample status and iteration counts.
    """
    H = np.ascontiguousarray(H, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    G = np.ascontiguousarray(G, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    B, n = q.shape
    m = h.shape[1]
    U = np.zeros((B, n))
    Lam = np.zeros((B, m))
    Active = np.zeros((B, m), dtype=np.uint8)
    Status = np.zeros(B, dtype=np.int64)
    Iters = np.zeros(B, dtype=np.int64)
    Lh = np.zeros((n, n))
    Y = np.zeros((n, m))
    S = np.zeros((m, m))
    Ls = np.zeros((m, m))
    act = np.zeros(m, dtype=np.int64)
    lam_act = np.zeros(m)
    r = np.zeros(m)
    z = np.zeros(n)
    w1 = np.zeros(n)
    tmp = np.zeros(max(n, m) if m > 0 else n)
    for b in range(B):
        status, iters = _solve_into(H[b], q[b], G[b], h[b], tol, max_iter,
                                    n, m, U[b], Lam[b], Active[b],
                                    Lh, Y, S, Ls, act, lam_act, r, z, w1, tmp)
        Status[b] = status
        Iters[b] = iters
    return U, Lam, Active, Status, Iters
