"""Sparse saddle-point solvers for ``[[K, B^T], [B, 0]] (u, p) = (f, c)``.

Two routes share one interface:

* ``"direct"``: LU of the bordered matrix (velocity/pressure constraint rows
  appended) followed by iterative refinement.
* ``"schur"``: LU of the (bordered) velocity block and a Krylov iteration on
  the pressure Schur complement ``B K^{-1} B^T``, preconditioned by the
  coefficient-weighted pressure mass matrix.  CG when ``K`` is symmetric,
  GMRES otherwise.

The pressure constraint ``c_p . p = 0`` removes the constant mode; optional
velocity constraint rows ``C_u u = 0`` remove velocity constants on the torus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Linear solver failed to reach the requested tolerance."""


@dataclass
class SaddleResult:
    u: np.ndarray
    p: np.ndarray
    residual: float  # relative residual of the assembled saddle system
    iterations: int


def _is_symmetric(K) -> bool:
    diff = abs(K - K.T)
    return diff.nnz == 0 or diff.max() <= 1e-14 * abs(K).max()


class SaddleSystem:
    """Factor once, solve for many right-hand sides."""

    def __init__(self, K, B, c_p, C_u=None, method="direct", precond_weights=None,
                 tol=1e-10, maxiter=2000):
        self.K = K.tocsc()
        self.B = B.tocsr()
        self.c_p = np.asarray(c_p, dtype=float)
        self.C_u = None if C_u is None else sp.csr_matrix(C_u)
        self.method = method
        self.tol = tol
        self.maxiter = maxiter
        self.nu, self.np_ = K.shape[0], B.shape[0]
        self.symmetric = _is_symmetric(K)
        if method == "direct":
            self._factor_direct()
        elif method == "schur":
            self._factor_schur(precond_weights)
        else:
            raise ValueError(f"unknown saddle solver method {method!r}")

    # --- assembly ------------------------------------------------------------
    def _bordered(self):
        nu, np_ = self.nu, self.np_
        ncu = 0 if self.C_u is None else self.C_u.shape[0]
        cp = sp.csr_matrix(self.c_p.reshape(-1, 1))
        blocks = [
            [self.K, self.B.T, None if not ncu else self.C_u.T, None],
            [self.B, None, None, cp],
            [None if not ncu else self.C_u, None, None, None],
            [None, cp.T, None, None],
        ]
        if not ncu:
            blocks = [[r[0], r[1], r[3]] for i, r in enumerate(blocks) if i != 2]
        m = sp.bmat(blocks, format="csc")
        assert m.shape[0] == nu + np_ + ncu + 1
        return m

    def _factor_direct(self):
        self.M = self._bordered()
        self.lu = spla.splu(self.M, permc_spec="COLAMD")

    def _velocity_block(self):
        if self.C_u is None:
            return self.K
        return sp.bmat([[self.K, self.C_u.T], [self.C_u, None]], format="csc")

    def _factor_schur(self, weights):
        self.M = self._bordered()
        self.lu_k = spla.splu(self._velocity_block(), permc_spec="COLAMD")
        self.ncu = 0 if self.C_u is None else self.C_u.shape[0]
        w = np.ones(self.np_) if weights is None else np.asarray(weights, dtype=float)
        # B K^{-1} B^T is spectrally close to diag(cell volume / a)
        self.prec_diag = w / self.c_p

    # --- solves -----------------------------------------------------------------
    def _apply_kinv(self, f):
        if self.C_u is None:
            return self.lu_k.solve(f)
        return self.lu_k.solve(np.concatenate([f, np.zeros(self.ncu)]))[: self.nu]

    def residual(self, u, p, f, c):
        ru = self.K @ u + self.B.T @ p - f
        rp = self.B @ u - c
        if self.C_u is not None:
            # least-squares velocity-mean multipliers; constraint rows are orthogonal
            rows = self.C_u
            lam = (rows @ ru) / np.asarray(rows.multiply(rows).sum(axis=1)).ravel()
            ru = ru - rows.T @ lam
        num = np.sqrt(np.dot(ru, ru) + np.dot(rp, rp))
        den = np.sqrt(np.dot(f, f) + np.dot(c, c))
        return num / den if den > 0 else num

    def _full_rhs(self, f, c):
        ncu = 0 if self.C_u is None else self.C_u.shape[0]
        return np.concatenate([f, c, np.zeros(ncu), [0.0]])

    def solve(self, f, c=None) -> SaddleResult:
        f = np.asarray(f, dtype=float)
        c = np.zeros(self.np_) if c is None else np.asarray(c, dtype=float)
        if not np.any(f) and not np.any(c):
            return SaddleResult(np.zeros(self.nu), np.zeros(self.np_), 0.0, 0)
        if self.method == "direct":
            return self._solve_direct(f, c)
        return self._solve_schur(f, c)

    def _bordered_residual(self, x, rhs):
        return rhs - self.M @ x

    def _solve_direct(self, f, c):
        rhs = self._full_rhs(f, c)
        x = self.lu.solve(rhs)
        its = 0
        for its in range(1, 4):
            r = self._bordered_residual(x, rhs)
            if np.linalg.norm(r) <= 1e-3 * self.tol * np.linalg.norm(rhs):
                break
            x = x + self.lu.solve(r)
        u, p = x[: self.nu], x[self.nu: self.nu + self.np_]
        res = self.residual(u, p, f, c)
        return SaddleResult(u, p, res, its)

    def _solve_schur(self, f, c):
        np_ = self.np_
        ones = np.ones(np_)
        cp = self.c_p

        def mean_free(q):
            return q - np.dot(cp, q) / np.dot(cp, ones) * ones

        def schur(q):
            return self.B @ self._apply_kinv(self.B.T @ mean_free(q))

        def prec(q):
            return mean_free(self.prec_diag * q)

        S = spla.LinearOperator((np_, np_), matvec=schur, dtype=float)
        P = spla.LinearOperator((np_, np_), matvec=prec, dtype=float)
        kf = self._apply_kinv(f)
        # the constant component of the reduced rhs is the compatibility defect
        rhs = self.B @ kf - c
        rhs = rhs - rhs.mean()
        count = [0]

        def cb(_):
            count[0] += 1

        # tighter than ``tol`` so that the assembled residual meets ``tol``
        rtol = 1e-2 * self.tol
        if self.symmetric:
            p, info = spla.cg(S, rhs, rtol=rtol, atol=0.0, maxiter=self.maxiter, M=P, callback=cb)
        else:
            p, info = spla.gmres(S, rhs, rtol=rtol, atol=0.0, restart=200, maxiter=self.maxiter,
                                 M=P, callback=cb, callback_type="pr_norm")
        if info > 0:
            raise SolverError(f"Schur complement iteration did not converge in {count[0]} steps")
        p = mean_free(p)
        u = kf - self._apply_kinv(self.B.T @ p)
        return SaddleResult(u, p, self.residual(u, p, f, c), count[0])
