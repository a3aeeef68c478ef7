"""Closed-form M-step updates given smoothed state moments.

Missing data enter through the observation mask, which plays the role of
the diagonal selection matrix W_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SmootherOutput, TimeSeriesPanel, VARIANCE_FLOOR, floor_eigenvalues, symmetrise

STATE_COV_FLOOR = 1e-8


@dataclass(frozen=True)
class SufficientStats:
    """Smoothed second moments and data cross-products.

    Attributes
    ----------
    S : (n, r, r)
        E[F_t F_tᵀ | data] for t = 1..n.
    S_prev : (n, r, r)
        E[F_{t-1} F_{t-1}ᵀ | data] for t = 1..n (first entry is the pre-sample state).
    S_lag : (n, r, r)
        E[F_t F_{t-1}ᵀ | data].
    cross : (p, r)
        Σ_t W_t X_t a_{t|n}ᵀ.
    weighted_S : (p, r, r)
        Σ_t W_{t,ii} S_t for each series i.
    X, mask : (n, p)
        Zero-filled data and observation mask.
    a, a0 : (n, r), (r,)
        Smoothed means for t = 1..n and for the pre-sample state.
    """

    S: np.ndarray
    S_prev: np.ndarray
    S_lag: np.ndarray
    cross: np.ndarray
    weighted_S: np.ndarray
    X: np.ndarray
    mask: np.ndarray
    a: np.ndarray
    a0: np.ndarray

    @property
    def n(self) -> int:
        return self.S.shape[0]


def sufficient_stats(panel: TimeSeriesPanel, sm: SmootherOutput) -> SufficientStats:
    a = sm.smoothed_mean
    S = symmetrise(np.einsum("ti,tj->tij", a, a) + sm.smoothed_cov)
    a_prev = np.vstack([sm.init_mean[None], a[:-1]])
    S0 = symmetrise(np.outer(sm.init_mean, sm.init_mean) + sm.init_cov)
    S_prev = np.concatenate([S0[None], S[:-1]], axis=0)
    S_lag = np.einsum("ti,tj->tij", a, a_prev) + sm.lag_cov
    X = panel.filled(0.0)
    W = panel.mask.astype(float)
    cross = X.T @ a
    weighted_S = np.einsum("ti,tjk->ijk", W, S)
    return SufficientStats(S, S_prev, S_lag, cross, weighted_S, X, panel.mask, a, sm.init_mean.copy())


def update_init(sm: SmootherOutput) -> tuple[np.ndarray, np.ndarray]:
    """Initial-state mean and covariance: the smoothed pre-sample moments."""
    return sm.init_mean.copy(), symmetrise(sm.init_cov)


def update_var_coef(stats: SufficientStats) -> np.ndarray:
    """Â = (Σ S_{t,t-1}) (Σ S_{t-1})⁻¹."""
    G = stats.S_prev.sum(axis=0)
    M = stats.S_lag.sum(axis=0)
    w = np.linalg.eigvalsh(symmetrise(G))
    if not w[0] > 1e-12 * max(w[-1], 1e-300):
        raise np.linalg.LinAlgError("factor second-moment matrix is singular; try fewer factors")
    return np.linalg.solve(G, M.T).T


def update_state_cov(stats: SufficientStats, A: np.ndarray, floor: float = STATE_COV_FLOOR) -> np.ndarray:
    n = stats.n
    S = stats.S.sum(axis=0)
    S10 = stats.S_lag.sum(axis=0)
    one_sided = (S - A @ S10.T) / n
    if np.max(np.abs(one_sided - one_sided.T)) > 1e-6:
        S00 = stats.S_prev.sum(axis=0)
        one_sided = (S - A @ S10.T - S10 @ A.T + A @ S00 @ A.T) / n
    return floor_eigenvalues(one_sided, floor)


def expected_sq_resid(stats: SufficientStats, loadings: np.ndarray) -> np.ndarray:
    """E[(X_{t,i} - Λ_i F_t)² | data] for every cell, shape (n, p); zero where missing."""
    fit = stats.a @ loadings.T
    quad = np.einsum("ik,tkl,il->ti", loadings, stats.S, loadings)
    out = stats.X ** 2 - 2.0 * stats.X * fit + quad
    return np.where(stats.mask, out, 0.0)


def update_idio_var(stats: SufficientStats, loadings: np.ndarray, previous: np.ndarray,
                    floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Idiosyncratic variances; missing cells contribute the previous estimate."""
    n = stats.n
    observed = expected_sq_resid(stats, loadings).sum(axis=0)
    n_missing = (~stats.mask).sum(axis=0)
    out = (observed + n_missing * np.asarray(previous, dtype=float)) / n
    return np.maximum(out, floor)


def expected_loglik(stats: SufficientStats, loadings, var_coef, idio_var, state_cov,
                    init_mean, init_cov, previous_idio_var=None) -> float:
    """Expected complete-data log-likelihood (up to constants) at fixed smoothed moments.

    Missing cells are integrated out under ``previous_idio_var`` so that the
    idiosyncratic update maximises this quantity.
    """
    n = stats.n
    S0, mu0 = stats.S_prev[0], stats.a0
    E0 = S0 - np.outer(mu0, init_mean) - np.outer(init_mean, mu0) + np.outer(init_mean, init_mean)
    _, ld0 = np.linalg.slogdet(init_cov)
    q = -0.5 * ld0 - 0.5 * np.trace(np.linalg.solve(init_cov, E0))
    S = stats.S.sum(axis=0)
    S10 = stats.S_lag.sum(axis=0)
    S00 = stats.S_prev.sum(axis=0)
    Eu = S - var_coef @ S10.T - S10 @ var_coef.T + var_coef @ S00 @ var_coef.T
    _, ldu = np.linalg.slogdet(state_cov)
    q += -0.5 * n * ldu - 0.5 * np.trace(np.linalg.solve(state_cov, Eu))
    resid = expected_sq_resid(stats, loadings)
    if previous_idio_var is None:
        previous_idio_var = idio_var
    contrib = np.where(stats.mask, np.log(idio_var) + resid / idio_var,
                       np.log(idio_var) + previous_idio_var / idio_var)
    return float(q - 0.5 * contrib.sum())


def mstep_state(stats: SufficientStats) -> tuple[np.ndarray, np.ndarray]:
    A = update_var_coef(stats)
    return A, update_state_cov(stats, A)


def _corr_from_params(theta: np.ndarray, r: int) -> np.ndarray:
    L = np.eye(r)
    L[np.tril_indices(r, -1)] = theta
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    return L @ L.T


def _corr_params(C: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(C)
    L = L / np.diag(L)[:, None]
    return L[np.tril_indices(C.shape[0], -1)]


def _stationary_criterion(theta: np.ndarray, S: np.ndarray, S10: np.ndarray, S00: np.ndarray,
                          n: int) -> tuple[float, np.ndarray]:
    """log|Σu| + tr(Σu⁻¹ M(A)) with Σu = R - A R Aᵀ, and its gradient in (vec A, corr params)."""
    r = S.shape[0]
    A = theta[: r * r].reshape(r, r)
    L = np.eye(r)
    L[np.tril_indices(r, -1)] = theta[r * r:]
    norms = np.linalg.norm(L, axis=1, keepdims=True)
    Lt = L / norms
    R = Lt @ Lt.T
    Su = R - A @ R @ A.T
    try:
        chol = np.linalg.cholesky(Su)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(theta)
    M = (S - A @ S10.T - S10 @ A.T + A @ S00 @ A.T) / n
    Si = np.linalg.inv(Su)
    value = 2.0 * np.sum(np.log(np.diag(chol))) + np.trace(Si @ M)
    G = Si - Si @ M @ Si
    grad_A = -2.0 * G @ A @ R + (2.0 / n) * Si @ (A @ S00 - S10)
    grad_Lt = 2.0 * (G - A.T @ G @ A) @ Lt
    grad_L = (grad_Lt - Lt * np.sum(Lt * grad_Lt, axis=1, keepdims=True)) / norms
    return float(value), np.r_[grad_A.ravel(), grad_L[np.tril_indices(r, -1)]]


def update_state_stationary(stats: SufficientStats, var_coef: np.ndarray,
                            state_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint (A, Σu) update under unit stationary factor variances.

    The stationary covariance R solving R = A R Aᵀ + Σu is held to a
    correlation matrix, which fixes the scale of every factor (otherwise
    an L1 penalty on Λ can be evaded by inflating the factors).  The
    problem is parametrised by A and a unit-row Cholesky factor of R and
    maximised numerically from the current values, which must satisfy
    the constraint.  The result is kept only if it improves on them.
    """
    from scipy.optimize import minimize

    r = var_coef.shape[0]
    S = stats.S.sum(axis=0)
    S10 = stats.S_lag.sum(axis=0)
    S00 = stats.S_prev.sum(axis=0)
    A0 = np.asarray(var_coef, dtype=float)
    R0 = _stationary_corr(A0, np.asarray(state_cov, dtype=float))
    theta0 = np.r_[A0.ravel(), _corr_params(R0)]
    f0, _ = _stationary_criterion(theta0, S, S10, S00, stats.n)
    res = minimize(_stationary_criterion, theta0, args=(S, S10, S00, stats.n), jac=True,
                   method="BFGS", options={"gtol": 1e-9, "maxiter": 1000})
    if not (np.isfinite(res.fun) and res.fun <= f0):
        return A0, np.asarray(state_cov, dtype=float)
    A = res.x[: r * r].reshape(r, r)
    R = _corr_from_params(res.x[r * r:], r)
    return A, symmetrise(R - A @ R @ A.T)


def _stationary_corr(A: np.ndarray, Su: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_discrete_lyapunov

    R = symmetrise(solve_discrete_lyapunov(A, Su))
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return R
