"""Relaxed quadratic programs as differentiable control layers.

A controller in this family solves, per state,

    min_u  0.5 u'Hu + q'u  +  sum_i w_i * pen(a_i'u - b_i)
    s.t.   A_hard u <= b_hard

where pen is either the hinge (linear penalty, the default) or the squared
hinge (quadratic penalty). The certificate conditions enter through the soft
rows (a_i, b_i), so the relaxation value r_i = max(0, a_i'u - b_i) measures
by how much the certificate decrease condition had to be violated; the hard
rows encode actuator limits and are never relaxed.

Both penalties are handled exactly, not by smoothing:

* linear: a saturation-regime outer loop. A soft row is either enforced as
  a constraint (its multiplier then satisfies 0 <= mu <= w) or saturated,
  in which case the hinge is linear and contributes w*a to the gradient.
  Regimes flip when a multiplier exceeds its weight or a saturated row's
  residual turns negative, and the loop reaches a fixed point that is the
  exact minimizer of the piecewise-quadratic objective.
* quad: one solve of the slack-augmented QP in (u, r) with Hessian block
  2*diag(w) and rows a_i'u - r_i <= b_i, r_i >= 0.

The layer is differentiable end to end: the backward pass solves a masked
batched KKT system (inactive rows are replaced by identity rows, which
forces their adjoint multiplier to zero) and emits gradients for q, the
soft rows and their offsets. H, the weights and the hard rows are treated
as constants of the controller.
"""

from dataclasses import dataclass

import numpy as np

from .._core import OPTIMAL, qp_solve_batch
from ..diff.tensor import Tensor, as_tensor, custom_node

_FLIP_TOL = 1e-9


@dataclass
class QpSolution:
    """Batched solve result; all arrays are numpy, leading axis is the batch."""

    u: np.ndarray            # (B, n) control
    relaxation: np.ndarray   # (B, ms) hinge values at the optimum
    mu_soft: np.ndarray      # (B, ms) effective soft multipliers
    lam_hard: np.ndarray     # (B, mh)
    active_soft: np.ndarray  # (B, ms) bool, soft row enforced and tight
    active_hard: np.ndarray  # (B, mh) bool
    saturated: np.ndarray    # (B, ms) bool (always False for quad penalty)
    active_nonneg: np.ndarray  # (B, ms) bool, quad penalty slack at its bound
    iters: np.ndarray        # (B,) kernel iterations, summed over regime loops


class RelaxedQpController:
    """Fixed problem family: H, penalty kind, weights and hard rows are set
    once; q and the soft rows vary per state."""

    def __init__(self, H, soft_weights, penalty="linear",
                 hard_A=None, hard_b=None, tol=1e-10, max_iter=200):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("H must be square")
        if not np.allclose(H, H.T, atol=1e-12):
            raise ValueError("H must be symmetric")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise ValueError("H must be positive definite") from None
        self.H = H
        self.n = H.shape[0]
        self.weights = np.atleast_1d(np.asarray(soft_weights, dtype=np.float64))
        if np.any(self.weights <= 0):
            raise ValueError("soft weights must be positive")
        self.ms = self.weights.shape[0]
        if penalty not in ("linear", "quad"):
            raise ValueError(f"unknown penalty kind {penalty!r}")
        self.penalty = penalty
        if hard_A is None:
            hard_A = np.zeros((0, self.n))
            hard_b = np.zeros(0)
        self.hard_A = np.asarray(hard_A, dtype=np.float64)
        self.hard_b = np.asarray(hard_b, dtype=np.float64)
        if self.hard_A.shape != (self.hard_b.shape[0], self.n):
            raise ValueError("hard row shape mismatch")
        self.mh = self.hard_b.shape[0]
        self.tol = float(tol)
        self.max_iter = int(max_iter)
        if penalty == "quad":
            nv = self.n + self.ms
            Ha = np.zeros((nv, nv))
            Ha[: self.n, : self.n] = H
            Ha[self.n:, self.n:] = np.diag(2.0 * self.weights)
            self._H_aug = Ha

    # -- numpy solves ------------------------------------------------------

    def _check(self, q, A, b):
        q = np.asarray(q, dtype=np.float64)
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != self.n:
            raise ValueError(f"q must be (B, {self.n})")
        B = q.shape[0]
        if A.shape != (B, self.ms, self.n) or b.shape != (B, self.ms):
            raise ValueError("soft row shapes do not match the controller")
        return q, A, b, B

    def solve_batch(self, q, A, b):
        """Solve the batch. Raises on any kernel failure: these programs are
        feasible by construction, so a bad status means a malformed input."""
        q, A, b, B = self._check(q, A, b)
        if self.penalty == "linear":
            sol = self._solve_linear(q, A, b, B)
        else:
            sol = self._solve_quad(q, A, b, B)
        return sol

    def _solve_linear(self, q, A, b, B):
        w = self.weights
        Hb = np.broadcast_to(self.H, (B, self.n, self.n))
        hardA = np.broadcast_to(self.hard_A, (B, self.mh, self.n))
        hardb = np.broadcast_to(self.hard_b, (B, self.mh))
        # start fully relaxed: the first subproblem then has only hard rows,
        # and every later enforced set is satisfied at the previous iterate,
        # so no subproblem the kernel sees is ever infeasible
        sat = np.ones((B, self.ms), dtype=bool)
        iters = np.zeros(B, dtype=np.int64)
        max_outer = 2 * self.ms + 6
        for _ in range(max_outer):
            q_eff = q + np.einsum("bm,bmn->bn", sat * w, A)
            # saturated rows are dropped from the constraint set; a zero row
            # with slack 1 keeps the batch rectangular and can never activate
            Am = np.where(sat[:, :, None], 0.0, A)
            bm = np.where(sat, 1.0, b)
            G = np.concatenate([Am, hardA], axis=1)
            h = np.concatenate([bm, hardb], axis=1)
            U, Lam, Active, Status, It = qp_solve_batch(
                Hb, q_eff, G, h, tol=self.tol, max_iter=self.max_iter)
            if Status.max() != OPTIMAL:
                raise RuntimeError(
                    f"QP kernel failed on {int((Status != 0).sum())} samples")
            iters += It
            mu = Lam[:, : self.ms]
            resid = np.einsum("bmn,bn->bm", A, U) - b
            to_sat = ~sat & (mu > w + _FLIP_TOL)
            to_unsat = sat & (resid < -_FLIP_TOL)
            flips = to_sat | to_unsat
            if not flips.any():
                break
            sat = sat ^ flips
        else:
            raise RuntimeError("saturation regime loop did not converge")
        active_soft = (Active[:, : self.ms] != 0) & ~sat
        mu_soft = np.where(sat, w, mu)
        return QpSolution(
            u=U,
            relaxation=np.maximum(resid, 0.0),
            mu_soft=mu_soft,
            lam_hard=Lam[:, self.ms:],
            active_soft=active_soft,
            active_hard=Active[:, self.ms:] != 0,
            saturated=sat,
            active_nonneg=np.zeros((B, self.ms), dtype=bool),
            iters=iters,
        )

    def _solve_quad(self, q, A, b, B):
        n, ms, mh = self.n, self.ms, self.mh
        nv = n + ms
        Hb = np.broadcast_to(self._H_aug, (B, nv, nv))
        qa = np.concatenate([q, np.zeros((B, ms))], axis=1)
        soft = np.concatenate([A, np.broadcast_to(-np.eye(ms), (B, ms, ms))], axis=2)
        nonneg = np.zeros((ms, nv))
        nonneg[:, n:] = -np.eye(ms)
        hard = np.zeros((mh, nv))
        hard[:, :n] = self.hard_A
        G = np.concatenate(
            [soft,
             np.broadcast_to(nonneg, (B, ms, nv)),
             np.broadcast_to(hard, (B, mh, nv))], axis=1)
        h = np.concatenate(
            [b, np.zeros((B, ms)), np.broadcast_to(self.hard_b, (B, mh))], axis=1)
        U, Lam, Active, Status, It = qp_solve_batch(
            Hb, qa, G, h, tol=self.tol, max_iter=self.max_iter)
        if Status.max() != OPTIMAL:
            raise RuntimeError(
                f"QP kernel failed on {int((Status != 0).sum())} samples")
        return QpSolution(
            u=U[:, :n],
            relaxation=U[:, n:],
            mu_soft=Lam[:, :ms],
            lam_hard=Lam[:, 2 * ms:],
            active_soft=Active[:, :ms] != 0,
            active_hard=Active[:, 2 * ms:] != 0,
            saturated=np.zeros((B, ms), dtype=bool),
            active_nonneg=Active[:, ms: 2 * ms] != 0,
            iters=It,
        )

    def solve(self, q, A, b):
        """Single-state convenience wrapper."""
        sol = self.solve_batch(q[None], A[None], b[None])
        return QpSolution(*(v[0] for v in (
            sol.u, sol.relaxation, sol.mu_soft, sol.lam_hard,
            sol.active_soft, sol.active_hard, sol.saturated,
            sol.active_nonneg, sol.iters)))

    # -- differentiable layer ------------------------------------------------

    def layer(self, q, A, b):
        """Differentiable batched solve.

        Accepts Tensor or ndarray inputs and returns (u, relaxation) as
        Tensors of shape (B, n) and (B, ms). Gradients flow to q, A and b;
        at regime boundaries (a multiplier exactly at its weight, a hinge
        exactly at zero) the layer picks one subgradient.
        """
        qt, At, bt = as_tensor(q), as_tensor(A), as_tensor(b)
        sol = self.solve_batch(qt.data, At.data, bt.data)
        out = np.concatenate([sol.u, sol.relaxation], axis=1)

        if self.penalty == "linear":
            vjp = self._vjp_linear(sol, At.data)
        else:
            vjp = self._vjp_quad(sol, At.data)

        node = custom_node(out, (qt, At, bt), vjp)
        return node[:, : self.n], node[:, self.n:]

    def _vjp_linear(self, sol, A):
        n, ms, mh = self.n, self.ms, self.mh
        w = self.weights
        u = sol.u
        sat = sol.saturated
        inc_soft = sol.active_soft          # in the KKT system
        B = u.shape[0]
        mt = ms + mh

        def vjp(ghat):
            ubar = ghat[:, :n]
            rbar = ghat[:, n:]
            # direct terms of the saturated hinges: r_j = a_j'u - b_j there
            rbar_sat = np.where(sat, rbar, 0.0)
            c = ubar + np.einsum("bm,bmn->bn", rbar_sat, A)
            include = np.concatenate(
                [inc_soft, sol.active_hard], axis=1)   # (B, mt)
            rows = np.concatenate(
                [np.where(inc_soft[:, :, None], A, 0.0),
                 np.where(sol.active_hard[:, :, None],
                          np.broadcast_to(self.hard_A, (B, mh, n)), 0.0)],
                axis=1)
            K = np.zeros((B, n + mt, n + mt))
            K[:, :n, :n] = self.H
            K[:, n:, :n] = rows
            K[:, :n, n:] = np.swapaxes(rows, 1, 2)
            idx = np.arange(mt)
            K[:, n + idx, n + idx] = np.where(include, 0.0, 1.0)
            rhs = np.zeros((B, n + mt))
            rhs[:, :n] = c
            sol_kkt = np.linalg.solve(K, rhs[..., None])[..., 0]
            phi = sol_kkt[:, :n]
            psi = sol_kkt[:, n: n + ms]
            qbar = -phi
            Abar = np.where(
                sat[:, :, None],
                rbar_sat[:, :, None] * u[:, None, :]
                - w[None, :, None] * phi[:, None, :],
                np.where(
                    inc_soft[:, :, None],
                    -sol.mu_soft[:, :, None] * phi[:, None, :]
                    - psi[:, :, None] * u[:, None, :],
                    0.0))
            bbar = np.where(sat, -rbar_sat, np.where(inc_soft, psi, 0.0))
            return qbar, Abar, bbar

        return vjp

    def _vjp_quad(self, sol, A):
        n, ms, mh = self.n, self.ms, self.mh
        u = sol.u
        B = u.shape[0]
        nv = n + ms
        mt = 2 * ms + mh
        nonneg_active = sol.active_nonneg

        def vjp(ghat):
            c = ghat  # (B, nv): gradient w.r.t. the augmented decision (u, r)
            soft_rows = np.concatenate(
                [A, np.broadcast_to(-np.eye(ms), (B, ms, ms))], axis=2)
            nn_rows = np.zeros((ms, nv))
            nn_rows[:, n:] = -np.eye(ms)
            hd_rows = np.zeros((mh, nv))
            hd_rows[:, :n] = self.hard_A
            include = np.concatenate(
                [sol.active_soft, nonneg_active, sol.active_hard], axis=1)
            rows = np.concatenate(
                [np.where(sol.active_soft[:, :, None], soft_rows, 0.0),
                 np.where(nonneg_active[:, :, None],
                          np.broadcast_to(nn_rows, (B, ms, nv)), 0.0),
                 np.where(sol.active_hard[:, :, None],
                          np.broadcast_to(hd_rows, (B, mh, nv)), 0.0)],
                axis=1)
            K = np.zeros((B, nv + mt, nv + mt))
            K[:, :nv, :nv] = self._H_aug
            K[:, nv:, :nv] = rows
            K[:, :nv, nv:] = np.swapaxes(rows, 1, 2)
            idx = np.arange(mt)
            K[:, nv + idx, nv + idx] = np.where(include, 0.0, 1.0)
            rhs = np.zeros((B, nv + mt))
            rhs[:, :nv] = c
            sol_kkt = np.linalg.solve(K, rhs[..., None])[..., 0]
            phi = sol_kkt[:, :n]
            psi = sol_kkt[:, nv: nv + ms]
            qbar = -phi
            act = sol.active_soft[:, :, None]
            Abar = np.where(
                act,
                -sol.mu_soft[:, :, None] * phi[:, None, :]
                - psi[:, :, None] * u[:, None, :],
                0.0)
            bbar = np.where(sol.active_soft, psi, 0.0)
            return qbar, Abar, bbar

        return vjp
