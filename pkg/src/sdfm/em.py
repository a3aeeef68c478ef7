"""EM estimation of the sparse DFM."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_discrete_lyapunov

from . import admm, kalman, mstep
from .core import DfmParams, FitConfig, SmootherOutput, TimeSeriesPanel, destandardise, floor_eigenvalues

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitResult:
    params: DfmParams
    factors: SmootherOutput
    objective_trace: tuple[float, ...]
    em_iterations: int
    converged: bool
    alpha_used: float
    r_used: int
    nonzero_counts: tuple[int, ...]
    admm_state: admm.AdmmState | None = None

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def spline_impute(panel: TimeSeriesPanel) -> np.ndarray:
    """Fill missing cells by a natural cubic spline through each series' observed points.

    Outside the first/last observation the series is held constant.
    """
    X = np.array(panel.values, dtype=float)
    t = np.arange(panel.n, dtype=float)
    for i in range(panel.p):
        obs = panel.mask[:, i]
        if obs.all():
            continue
        to, xo = t[obs], X[obs, i]
        miss = ~obs
        if to.size == 1:
            X[miss, i] = xo[0]
            continue
        X[miss, i] = CubicSpline(to, xo, bc_type="natural")(t[miss])
        X[t < to[0], i] = xo[0]
        X[t > to[-1], i] = xo[-1]
    return X


def pca(X: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leading eigenpairs of XᵀX/n.

    Returns (eigenvalues (r,), eigenvectors (p, r), all eigenvalues descending).
    Eigenvector signs are fixed so each column sums to a nonnegative value.
    """
    n = X.shape[0]
    w, V = np.linalg.eigh(X.T @ X / n)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    V = V * np.where(V.sum(axis=0) < 0, -1.0, 1.0)
    return w[:r], V[:, :r], w


def initialise(panel: TimeSeriesPanel, r: int, variance_floor: float = mstep.VARIANCE_FLOOR) -> DfmParams:
    """Starting values from spline imputation, PCA and a least-squares VAR(1)."""
    if not 1 <= r <= min(panel.n, panel.p):
        raise ValueError(f"r={r} must lie in 1..min(n, p)={min(panel.n, panel.p)}")
    X = spline_impute(panel)
    w, V, w_all = pca(X, r)
    if not w[-1] > 1e-10 * max(w_all[0], 1e-300):
        raise ValueError(f"r={r} exceeds the numerical rank of the data")
    Lam = V * np.sqrt(w)
    F = X @ V / np.sqrt(w)
    F0, F1 = F[:-1], F[1:]
    A = np.linalg.lstsq(F0, F1, rcond=None)[0].T
    resid = F1 - F0 @ A.T
    Su = floor_eigenvalues(resid.T @ resid / max(len(resid) - 1, 1), mstep.STATE_COV_FLOOR)
    sig2 = np.maximum(np.mean((X - F @ Lam.T) ** 2, axis=0), variance_floor)
    P0 = np.eye(r)
    if np.max(np.abs(np.linalg.eigvals(A))) < 1:
        try:
            P0 = floor_eigenvalues(solve_discrete_lyapunov(A, Su), mstep.STATE_COV_FLOOR)
        except (np.linalg.LinAlgError, ValueError):
            P0 = np.eye(r)
    return DfmParams(Lam, A, sig2, Su, np.zeros(r), P0)


def penalised_objective(loglik: float, loadings: np.ndarray, alpha: float) -> float:
    return -loglik + alpha * float(np.abs(loadings).sum())


def em_step(panel: TimeSeriesPanel, params: DfmParams, sm: SmootherOutput, config: FitConfig,
            warm: admm.AdmmState | None) -> tuple[DfmParams, admm.AdmmState]:
    """One M-step: (A, Σu), initial state, loadings by ADMM, then idiosyncratic variances."""
    stats = mstep.sufficient_stats(panel, sm)
    if config.unit_factor_variance:
        A, Su = mstep.update_state_stationary(stats, params.var_coef, params.state_cov)
    else:
        A = mstep.update_var_coef(stats)
        Su = mstep.update_state_cov(stats, A)
    a0, P0 = mstep.update_init(sm)
    Z, state = admm.solve_loadings(
        stats, params.idio_var, config.alpha, config.admm_nu, warm=warm,
        max_iter=config.admm_max_iter, tol_abs=config.admm_tol_abs, tol_rel=config.admm_tol_rel)
    # generalised-EM guard: an inexact ADMM solve must not worsen the loading subproblem
    f_new = admm.loading_objective(stats, params.idio_var, Z, config.alpha)
    f_old = admm.loading_objective(stats, params.idio_var, params.loadings, config.alpha)
    if not f_new <= f_old:
        Z = params.loadings
    sig2 = mstep.update_idio_var(stats, Z, params.idio_var, config.variance_floor)
    return DfmParams(Z, A, sig2, Su, a0, P0), state


def fit(panel: TimeSeriesPanel, config: FitConfig, init: DfmParams | None = None,
        warm: admm.AdmmState | None = None) -> FitResult:
    """Fit the sparse DFM by EM.

    ``init`` and ``warm`` allow warm starts (e.g. along a grid of penalties);
    otherwise the model is initialised by :func:`initialise` and ADMM starts
    from zero.  Convergence is declared when the relative change of the
    penalised negative log-likelihood drops below ``config.em_tol``.
    """
    config.check_panel(panel)
    r, alpha = config.num_factors, config.alpha
    params = init if init is not None else initialise(panel, r, config.variance_floor)
    if config.unit_factor_variance:
        params = params.with_unit_factor_variance()
    if params.r != r or params.p != panel.p:
        raise ValueError("initial parameters do not match the panel and config")
    state = warm
    trace: list[float] = []
    best = None
    converged = False
    m_steps = 0
    for it in range(config.em_max_iter + 1):
        sm = kalman.filter_smooth(panel, params, config.variance_floor)
        obj = penalised_objective(sm.loglik, params.loadings, alpha)
        if not np.isfinite(obj):
            raise FloatingPointError(f"non-finite objective at EM iteration {it}")
        trace.append(obj)
        if best is None or obj <= best[0]:
            best = (obj, params, sm)
        if it > 0 and abs(trace[-2] - obj) / (1.0 + abs(obj)) < config.em_tol:
            converged = True
            break
        if it == config.em_max_iter:
            break
        params, state = em_step(panel, params, sm, config, state)
        m_steps += 1

    _, params, sm = best
    if not converged:
        log.info("EM did not converge in %d iterations (alpha=%g)", config.em_max_iter, alpha)
    if params.spectral_radius() >= 1:
        warnings.warn("fitted VAR matrix is not stationary", RuntimeWarning, stacklevel=2)
    nz = tuple(int(k) for k in np.count_nonzero(params.loadings, axis=0))
    return FitResult(params, sm, tuple(trace), m_steps, converged, float(alpha), r, nz, state)


def impute(result: FitResult, panel: TimeSeriesPanel, original_scale: bool = False) -> np.ndarray:
    """Observed cells unchanged; missing cells replaced by the smoothed common component."""
    common = result.factors.smoothed_mean @ result.params.loadings.T
    out = np.where(panel.mask, panel.values, common)
    return destandardise(panel, out) if original_scale else out
