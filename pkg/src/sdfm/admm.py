"""L1-penalised loading update solved by ADMM.

The loading subproblem, with every other parameter and the smoothed
moments held fixed, is

    f(Λ) = ½ Σ_t tr[B_t (Λ S_t Λᵀ - 2 X_t a_tᵀ Λᵀ)] + α ‖Λ‖₁,

with B_t = W_t Σε⁻¹ W_t diagonal.  The ridge-type primal step has a
pr x pr system matrix Σ_t S_t ⊗ B_t + νI.  Because every B_t is diagonal,
commuting the Kronecker factors turns it into p independent r x r blocks
(Σ_t B_{t,ii} S_t + νI), so one primal step costs O(p r³) rather than
O(p³ r³).
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .mstep import SufficientStats


@dataclass(frozen=True)
class AdmmState:
    loadings: np.ndarray      # primal Λ
    aux: np.ndarray           # Z, carries the exact zeros
    dual: np.ndarray          # scaled multipliers U
    primal_residual: float
    dual_residual: float
    iterations: int
    converged: bool


def soft_threshold(M, tau: float) -> np.ndarray:
    """Elementwise sign(m) max(|m| - tau, 0); thresholded entries are exactly +0.0."""
    if tau < 0:
        raise ValueError("threshold must be nonnegative")
    M = np.asarray(M, dtype=float)
    return np.where(np.abs(M) > tau, M - tau * np.sign(M), 0.0)


def _block_inverses(blocks: np.ndarray) -> np.ndarray:
    """Inverses of a stack of SPD r x r blocks via Cholesky factors."""
    if not np.all(np.isfinite(blocks)):
        raise ValueError("non-finite entries in block system")
    L = np.linalg.cholesky(blocks)
    Linv = np.linalg.inv(L)
    return np.swapaxes(Linv, -1, -2) @ Linv


def block_system(weighted_S: np.ndarray, idio_var: np.ndarray, nu: float) -> np.ndarray:
    """Stack of blocks Σ_t W_{t,ii} S_t / σ²_i + νI, shape (p, r, r)."""
    r = weighted_S.shape[-1]
    return weighted_S / np.asarray(idio_var, dtype=float)[:, None, None] + nu * np.eye(r)


def fast_block_solve(S_blocks: np.ndarray, weights: np.ndarray, nu: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (Σ_t S_t ⊗ diag(weights_t) + νI) vec(Λ) = vec(rhs) one series at a time.

    Parameters
    ----------
    S_blocks : ndarray, shape (n, r, r)
        The matrices S_t.
    weights : ndarray, shape (n, p)
        Diagonals of B_t (nonnegative).
    nu : float
        Ridge weight, must be positive.
    rhs : ndarray, shape (p, r)

    Returns
    -------
    ndarray, shape (p, r)
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    r = S_blocks.shape[-1]
    blocks = np.einsum("ti,tjk->ijk", weights, S_blocks) + nu * np.eye(r)
    return np.einsum("ijk,ik->ij", _block_inverses(blocks), np.asarray(rhs, dtype=float))


def primal_solve(stats: SufficientStats, idio_var: np.ndarray, nu: float,
                 Z: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Ridge-type Λ-step of ADMM for given auxiliary Z and scaled dual U."""
    inv = _block_inverses(block_system(stats.weighted_S, idio_var, nu))
    rhs = stats.cross / idio_var[:, None] + nu * (Z - U)
    return np.einsum("ijk,ik->ij", inv, rhs)


def loading_objective(stats: SufficientStats, idio_var: np.ndarray, loadings: np.ndarray,
                      alpha: float) -> float:
    """Penalised loading objective f(Λ) (terms not involving Λ dropped)."""
    quad = np.einsum("ik,ikl,il->i", loadings, stats.weighted_S, loadings)
    lin = np.einsum("ik,ik->i", loadings, stats.cross)
    return float(0.5 * np.sum((quad - 2.0 * lin) / idio_var) + alpha * np.abs(loadings).sum())


@numba.njit(cache=True)
def _admm_iterations(inv, base, Z, U, nu, tau, max_iter, tol_abs, tol_rel):
    p, r = base.shape
    Lam = Z.copy()
    sqrt_n = np.sqrt(p * r)
    r_norm = np.inf
    s_norm = np.inf
    rhs = np.empty(r)
    it = 0
    for it in range(1, max_iter + 1):
        r2 = s2 = lam2 = z2 = u2 = 0.0
        for i in range(p):
            for k in range(r):
                rhs[k] = base[i, k] + nu * (Z[i, k] - U[i, k])
            for j in range(r):
                acc = 0.0
                for k in range(r):
                    acc += inv[i, j, k] * rhs[k]
                Lam[i, j] = acc
            for j in range(r):
                m = Lam[i, j] + U[i, j]
                if m > tau:
                    z = m - tau
                elif m < -tau:
                    z = m + tau
                else:
                    z = 0.0
                dz = z - Z[i, j]
                s2 += dz * dz
                Z[i, j] = z
                u = U[i, j] + Lam[i, j] - z
                U[i, j] = u
                d = Lam[i, j] - z
                r2 += d * d
                lam2 += Lam[i, j] * Lam[i, j]
                z2 += z * z
                u2 += u * u
        r_norm = np.sqrt(r2)
        s_norm = nu * np.sqrt(s2)
        eps_pri = sqrt_n * tol_abs + tol_rel * max(np.sqrt(lam2), np.sqrt(z2))
        eps_dual = sqrt_n * tol_abs + tol_rel * nu * np.sqrt(u2)
        if r_norm <= eps_pri and s_norm <= eps_dual:
            return Lam, Z, U, r_norm, s_norm, it, True
    return Lam, Z, U, r_norm, s_norm, it, False


def solve_loadings(stats: SufficientStats, idio_var: np.ndarray, alpha: float, nu: float = 1.0,
                   warm: AdmmState | None = None, max_iter: int = 2000,
                   tol_abs: float = 1e-6, tol_rel: float = 1e-4) -> tuple[np.ndarray, AdmmState]:
    """Minimise f(Λ) by ADMM and return the sparse iterate Z.

    A previous :class:`AdmmState` of matching shape warm-starts (Z, U);
    otherwise both start at zero.  Stops on the usual scaled primal/dual
    residual test, or after ``max_iter`` iterations with
    ``converged=False``.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if not nu > 0:
        raise ValueError("nu must be positive")
    idio_var = np.asarray(idio_var, dtype=float)
    p, r = stats.cross.shape
    if warm is not None and warm.aux.shape == (p, r):
        Z, U = warm.aux.copy(), warm.dual.copy()
    else:
        Z, U = np.zeros((p, r)), np.zeros((p, r))

    inv = _block_inverses(block_system(stats.weighted_S, idio_var, nu))
    base = stats.cross / idio_var[:, None]
    Lam, Z, U, r_norm, s_norm, it, converged = _admm_iterations(
        inv, base, Z, U, float(nu), float(alpha) / nu, int(max_iter), float(tol_abs), float(tol_rel))
    state = AdmmState(Lam, Z, U, r_norm, s_norm, it, converged)
    return Z, state
