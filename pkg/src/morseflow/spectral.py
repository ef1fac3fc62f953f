"""Constrained symmetric generalized eigensolves and Morse counting.

`solve_pencil` is the contract path: project onto the constraint basis,
factor the projected mass, reduce to a standard symmetric problem and take
the complete spectrum. `PencilOperator` adds cached-factor fast paths used
by the flow scan (full eigenvalues, and dense-LU block inverse iteration for
the few eigenvalues nearest a shift).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, lapack, lu_factor, lu_solve, solve_triangular

from .assembly import ConstraintSpace, FormSystem
from .errors import NumericalBreakdownError

__all__ = [
    "EigenSolution",
    "solve_pencil",
    "morse_index",
    "borderline_indices",
    "kernel_basis",
    "default_kernel_tol",
    "PencilOperator",
]


@dataclass
class EigenSolution:
    """Eigenpairs of the constrained pencil, ascending, M-orthonormal vectors.

    Eigenvectors are in full FE coordinates (constraint basis applied).
    lam_shift is subtracted from the raw pencil eigenvalues, which realizes
    the shifted pencil (D - lam M, M) exactly.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    t: float
    lam_shift: float = 0.0


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def _mass_cholesky(Mp: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; failure reports the pivot index."""
    c, info = lapack.dpotrf(Mp, lower=1)
    if info > 0:
        raise NumericalBreakdownError("projected mass factorization failed", pivot=int(info))
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return np.tril(c)


def solve_pencil(system: FormSystem, constraints: ConstraintSpace,
                 lam_shift: float = 0.0) -> EigenSolution:
    """All eigenpairs of the projected pencil (B^T D B, B^T M B).

    An empty constrained subspace yields an empty spectrum, not an error.
    """
    A = _dense(constraints.project(system.stiffness))
    if A.size == 0:
        return EigenSolution(np.empty(0), np.empty((constraints.n_dof, 0)),
                             system.t, lam_shift)
    Mp = _dense(constraints.project(system.mass))
    L = _mass_cholesky(Mp)
    S = solve_triangular(L, solve_triangular(L, A, lower=True).T, lower=True)
    S = 0.5 * (S + S.T)
    w, Z = np.linalg.eigh(S)
    V = solve_triangular(L.T, Z, lower=False)
    return EigenSolution(w - lam_shift, constraints.expand(V), system.t, lam_shift)


def morse_index(solution: EigenSolution, lam: float = 0.0, tol: float = 1e-8) -> int:
    """Count of eigenvalues < lam - tol; borderline values are never counted."""
    return int(np.count_nonzero(solution.eigenvalues < lam - tol))


def borderline_indices(solution: EigenSolution, lam: float = 0.0,
                       tol: float = 1e-8) -> np.ndarray:
    """Indices of eigenvalues within +-tol of the level lam."""
    return np.nonzero(np.abs(solution.eigenvalues - lam) <= tol)[0]


def kernel_basis(solution: EigenSolution, tol: float) -> np.ndarray:
    """M-orthonormal eigenvectors with |eigenvalue| <= tol (possibly empty)."""
    mask = np.abs(solution.eigenvalues) <= tol
    return solution.eigenvectors[:, mask]


def default_kernel_tol(system: FormSystem) -> float:
    """1e-6 relative to the largest stiffness entry."""
    scale = np.abs(system.stiffness).max() if system.stiffness.nnz else 1.0
    return 1e-6 * max(scale, 1e-300)


class PencilOperator:
    """Projected pencil with a cached mass factor for repeated solves in t.

    The constraint space and mass matrix are t-independent, so their
    projection and Cholesky factor are computed once.
    """

    def __init__(self, mass, constraints: ConstraintSpace, seed: int = 0):
        self.constraints = constraints
        self.Mp = _dense(constraints.project(mass))
        self.n = self.Mp.shape[0]
        self.L = _mass_cholesky(self.Mp) if self.n else np.empty((0, 0))
        self._rng = np.random.default_rng(seed)

    def project(self, stiffness) -> np.ndarray:
        return _dense(self.constraints.project(stiffness))

    def eigenvalues_all(self, A_proj: np.ndarray) -> np.ndarray:
        """Complete ascending spectrum of the projected pencil (values only)."""
        if self.n == 0:
            return np.empty(0)
        S = solve_triangular(self.L, solve_triangular(self.L, A_proj, lower=True).T,
                             lower=True)
        return np.linalg.eigvalsh(0.5 * (S + S.T))

    def eigenpairs_window(self, A_proj: np.ndarray, lo: int, hi: int):
        """Eigenpairs with spectrum indices lo..hi (inclusive), full coordinates."""
        S = solve_triangular(self.L, solve_triangular(self.L, A_proj, lower=True).T,
                             lower=True)
        w, Z = eigh(0.5 * (S + S.T), subset_by_index=[lo, hi])
        V = solve_triangular(self.L.T, Z, lower=False)
        return w, self.constraints.expand(V)

    def nearest_eigenpairs(self, A_proj: np.ndarray, k: int, shift: float = 0.0,
                           warm: np.ndarray | None = None,
                           tol: float = 1e-9, max_iter: int = 60):
        """The k eigenpairs nearest `shift` by dense-LU block inverse iteration.

        Returns (values, vectors in constrained coordinates, converged flag).
        Residual test: ||A v - w M v|| <= tol * (||A|| + |w| ||M||) per vector.
        Callers must fall back to a full solve when converged is False.
        """
        n = self.n
        k = min(k, n)
        if k == 0:
            return np.empty(0), np.empty((n, 0)), True
        block = min(n, k + 3)
        scaleA = max(np.abs(A_proj).max(), 1e-300)
        scaleM = max(np.abs(self.Mp).max(), 1e-300)

        B = A_proj - shift * self.Mp
        try:
            lu = lu_factor(B)
        except np.linalg.LinAlgError:
            lu = lu_factor(B + (1e-12 * scaleA) * np.eye(n))
        if not np.all(np.isfinite(lu[0])) or np.abs(np.diag(lu[0])).min() < 1e-14 * scaleA:
            lu = lu_factor(B + (1e-10 * scaleA) * np.eye(n))

        if warm is not None and warm.shape[0] == n and warm.shape[1] > 0:
            V = np.hstack([warm[:, :block],
                           self._rng.standard_normal((n, max(0, block - warm.shape[1])))])
        else:
            V = self._rng.standard_normal((n, block))

        w = np.zeros(block)
        for _ in range(max_iter):
            W = lu_solve(lu, self.Mp @ V)
            # M-orthonormalize the block
            G = W.T @ (self.Mp @ W)
            G = 0.5 * (G + G.T)
            try:
                Lg = np.linalg.cholesky(G)
                W = solve_triangular(Lg, W.T, lower=True).T
            except np.linalg.LinAlgError:
                gw, gv = np.linalg.eigh(G)
                keep = gw > 1e-14 * gw.max()
                W = (W @ gv[:, keep]) / np.sqrt(gw[keep])
                if W.shape[1] < block:
                    extra = self._rng.standard_normal((n, block - W.shape[1]))
                    W = np.hstack([W, extra])
                    G = W.T @ (self.Mp @ W)
                    Lg = np.linalg.cholesky(0.5 * (G + G.T))
                    W = solve_triangular(Lg, W.T, lower=True).T
            # Rayleigh-Ritz on the block
            Ap = W.T @ (A_proj @ W)
            w_small, U = np.linalg.eigh(0.5 * (Ap + Ap.T))
            order = np.argsort(np.abs(w_small - shift))
            w, V = w_small[order], W @ U[:, order]
            R = A_proj @ V[:, :k] - (self.Mp @ V[:, :k]) * w[:k]
            resid = np.linalg.norm(R, axis=0)
            bound = tol * (scaleA + np.abs(w[:k]) * scaleM)
            if np.all(resid <= bound):
                break
        else:
            asc = np.argsort(w[:k])
            return w[:k][asc], V[:, :k][:, asc], False
        asc = np.argsort(w[:k])
        return w[:k][asc], V[:, :k][:, asc], True

    def expand(self, V: np.ndarray) -> np.ndarray:
        return self.constraints.expand(V)
