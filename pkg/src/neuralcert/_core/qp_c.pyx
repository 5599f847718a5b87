# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled dual active-set QP kernel.

Line-for-line twin of qp_py.py; see that module for the algorithm notes.
Any change here must be mirrored there (and vice versa) to preserve the
bit-identical-backends guarantee. Built with FP contraction disabled.
"""

import numpy as np

from libc.math cimport sqrt, INFINITY

OPTIMAL = 0
INFEASIBLE = 1
ITER_LIMIT = 2
FACTOR_FAIL = 3


cdef int _chol_factor(const double[:, ::1] A, double[:, ::1] L, int n) noexcept:
    # lower-triangular L with A = L L', returns 0 on success
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s = s - L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return 1
                L[i, j] = sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return 0


cdef void _chol_solve(const double[:, ::1] L, const double[::1] b, double[::1] x, int n) noexcept:
    # solve L L' x = b via forward then back substitution
    cdef int i, k
    cdef double s
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


cdef int _refactor(const double[:, ::1] Lh, const double[:, ::1] G, const long[::1] act, int na,
                   int n, double[:, ::1] Y, double[:, ::1] S, double[:, ::1] Ls,
                   double[::1] tmp) noexcept:
    """Rebuild Y = H^-1 N' and the Cholesky factor of S = N H^-1 N'."""
    cdef int i, j, k
    cdef double s
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
    cdef int n = q.shape[0]
    cdef int m = h.shape[0]
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
    cdef int status, iters
    status, iters = _solve_into(H, q, G, h, tol, max_iter, n, m,
                                u, lam, active, Lh, Y, S, Ls,
                                act, lam_act, r, z, w1, tmp)
    if status == FACTOR_FAIL:
        raise ValueError("H is not positive definite")
    return u, lam, active, status, iters


cdef (int, int) _solve_into(const double[:, ::1] H, const double[::1] q, const double[:, ::1] G,
                            const double[::1] h, double tol, int max_iter, int n, int m,
                            double[::1] u, double[::1] lam, unsigned char[::1] active,
                            double[:, ::1] Lh, double[:, ::1] Y, double[:, ::1] S,
                            double[:, ::1] Ls, long[::1] act, double[::1] lam_act,
                            double[::1] r, double[::1] z, double[::1] w1,
                            double[::1] tmp) noexcept:
    cdef int i, j, k, p, na, iters, kdrop
    cdef double s, v, vp, lam_p, zz, t1, t2, t, gz, cand
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
                t2 = INFINITY
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
            t2 = INFINITY
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
    cdef int B = q.shape[0]
    cdef int n = q.shape[1]
    cdef int m = h.shape[1]
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
    cdef const double[:, :, ::1] Hv = H
    cdef const double[:, ::1] qv = q
    cdef const double[:, :, ::1] Gv = G
    cdef const double[:, ::1] hv = h
    cdef double[:, ::1] Uv = U
    cdef double[:, ::1] Lamv = Lam
    cdef unsigned char[:, ::1] Actv = Active
    cdef long[::1] Statusv = Status
    cdef long[::1] Itersv = Iters
    cdef double[:, ::1] Lhv = Lh
    cdef double[:, ::1] Yv = Y
    cdef double[:, ::1] Sv = S
    cdef double[:, ::1] Lsv = Ls
    cdef long[::1] actv = act
    cdef double[::1] lam_actv = lam_act
    cdef double[::1] rv = r
    cdef double[::1] zv = z
    cdef double[::1] w1v = w1
    cdef double[::1] tmpv = tmp
    cdef int b, status, iters
    cdef double ctol = tol
    cdef int cmax = max_iter
    for b in range(B):
        status, iters = _solve_into(Hv[b], qv[b], Gv[b], hv[b], ctol, cmax,
                                    n, m, Uv[b], Lamv[b], Actv[b],
                                    Lhv, Yv, Sv, Lsv, actv, lam_actv, rv, zv, w1v, tmpv)
        Statusv[b] = status
        Itersv[b] = iters
    return U, Lam, Active, Status, Iters
