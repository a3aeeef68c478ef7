"""Kalman filtering and smoothing for the exact DFM.

The production path processes the observations one scalar at a time
(univariate treatment): with a diagonal idiosyncratic covariance every
measurement update is a rank-one correction and needs no matrix inverse.
Predictions between periods stay multivariate.  A classical vector
filter/smoother is kept alongside as a reference for testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import DfmParams, KalmanBreakdown, SmootherOutput, TimeSeriesPanel, VARIANCE_FLOOR, symmetrise

LOG_2PI = float(np.log(2.0 * np.pi))
EIG_FLOOR = 1e-10


@numba.njit(cache=True)
def _univariate_pass(X, obs, Lam, A, Q, sig2, a0, P0, skip_tol):
    n, p = X.shape
    r = A.shape[0]
    a_pred = np.zeros((n, r))
    P_pred = np.zeros((n, r, r))
    a_filt = np.zeros((n, r))
    P_filt = np.zeros((n, r, r))
    v_all = np.zeros((n, p))
    C_all = np.ones((n, p))
    K_all = np.zeros((n, p, r))
    used = np.zeros((n, p), dtype=np.bool_)
    loglik = 0.0
    err_t = -1
    err_i = -1
    err_c = 0.0
    n_skipped = 0
    log2pi = np.log(2.0 * np.pi)

    PL = np.zeros(r)
    a = A @ a0
    P = A @ P0 @ A.T + Q
    P = 0.5 * (P + P.T)
    for t in range(n):
        a_pred[t] = a
        P_pred[t] = P
        for i in range(p):
            if not obs[t, i]:
                continue
            lam = Lam[i]
            C = sig2[i]
            v = X[t, i]
            for j in range(r):
                acc = 0.0
                for k in range(r):
                    acc += P[j, k] * lam[k]
                PL[j] = acc
                C += lam[j] * acc
                v -= lam[j] * a[j]
            if C < 0.0:
                err_t = t
                err_i = i
                err_c = C
                return (a_pred, P_pred, a_filt, P_filt, v_all, C_all, K_all, used,
                        loglik, err_t, err_i, err_c, n_skipped)
            if C <= skip_tol:
                n_skipped += 1
                continue
            for j in range(r):
                K_all[t, i, j] = PL[j] / C
                a[j] += K_all[t, i, j] * v
            for j in range(r):
                for k in range(r):
                    P[j, k] -= K_all[t, i, j] * PL[k]
            v_all[t, i] = v
            C_all[t, i] = C
            used[t, i] = True
            loglik -= 0.5 * (log2pi + np.log(C) + v * v / C)
        a_filt[t] = a
        P_filt[t] = P
        a = A @ a
        P = A @ P @ A.T + Q
        P = 0.5 * (P + P.T)

    return (a_pred, P_pred, a_filt, P_filt, v_all, C_all, K_all, used,
            loglik, err_t, err_i, err_c, n_skipped)


@numba.njit(cache=True)
def _univariate_smooth(Lam, A, a0, P0, a_pred, P_pred, v_all, C_all, K_all, used):
    n, p = v_all.shape
    r = A.shape[0]
    a_sm = np.zeros((n, r))
    P_sm = np.zeros((n, r, r))
    b = np.zeros(r)
    J = np.zeros((r, r))
    g = np.zeros(r)
    for t in range(n - 1, -1, -1):
        for i in range(p - 1, -1, -1):
            if not used[t, i]:
                continue
            lam = Lam[i]
            K = K_all[t, i]
            C = C_all[t, i]
            # with L = I - K λᵀ:  Lᵀb = b - λ (Kᵀb),
            # LᵀJL = J - λgᵀ - gλᵀ + (Kᵀg) λλᵀ  where g = J K
            kb = 0.0
            for j in range(r):
                kb += K[j] * b[j]
            coef = v_all[t, i] / C - kb
            for j in range(r):
                b[j] += lam[j] * coef
            s = 0.0
            for j in range(r):
                acc = 0.0
                for k in range(r):
                    acc += J[j, k] * K[k]
                g[j] = acc
                s += K[j] * acc
            s += 1.0 / C
            for j in range(r):
                for k in range(r):
                    J[j, k] += s * lam[j] * lam[k] - lam[j] * g[k] - g[j] * lam[k]
        Pt = P_pred[t]
        a_sm[t] = a_pred[t] + Pt @ b
        Ps = Pt - Pt @ J @ Pt
        P_sm[t] = 0.5 * (Ps + Ps.T)
        b = A.T @ b
        J = A.T @ J @ A
    a0_sm = a0 + P0 @ b
    P0_sm = P0 - P0 @ J @ P0
    return a_sm, P_sm, a0_sm, 0.5 * (P0_sm + P0_sm.T)


def _check_inputs(panel: TimeSeriesPanel, params: DfmParams) -> None:
    if params.p != panel.p:
        raise ValueError(f"params have p={params.p}, panel has p={panel.p}")
    for name in ("loadings", "var_coef", "idio_var", "state_cov", "init_mean", "init_cov"):
        if not np.all(np.isfinite(getattr(params, name))):
            raise ValueError(f"non-finite entries in {name}")


def _inverse_floored(M: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Batched inverse of symmetric matrices via eigendecomposition with an eigenvalue floor."""
    w, V = np.linalg.eigh(symmetrise(M))
    w = np.maximum(w, floor)
    return (V / w[..., None, :]) @ np.swapaxes(V, -1, -2)


def lag_one_cov(smoothed_cov: np.ndarray, predicted_cov: np.ndarray, filtered_cov: np.ndarray,
                var_coef: np.ndarray, init_cov: np.ndarray) -> np.ndarray:
    """Lag-one smoothed cross-covariances Cov(F_t, F_{t-1} | all data).

    Uses P_{t,t-1|n} = P_{t|n} P_{t|t-1}^{-1} A P_{t-1|t-1} for t = 1..n,
    where P_{0|0} is the initial covariance.

    Parameters
    ----------
    smoothed_cov, predicted_cov, filtered_cov : ndarray, shape (n, r, r)
        P_{t|n}, P_{t|t-1} and P_{t|t}.
    var_coef : ndarray, shape (r, r)
    init_cov : ndarray, shape (r, r)
        Covariance of the pre-sample state F_0.
    """
    smoothed_cov = np.asarray(smoothed_cov, dtype=float)
    prev_filtered = np.concatenate([np.asarray(init_cov, dtype=float)[None], filtered_cov[:-1]], axis=0)
    out = smoothed_cov @ _inverse_floored(predicted_cov) @ var_coef @ prev_filtered
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=(1, 2)))[0])
        raise np.linalg.LinAlgError(f"singular predicted covariance at t={bad + 1}")
    return out


def filter_smooth(panel: TimeSeriesPanel, params: DfmParams,
                  variance_floor: float = VARIANCE_FLOOR) -> SmootherOutput:
    """Univariate Kalman filter and smoother with missing-data skipping.

    Scalar updates with innovation variance at or below
    ``variance_floor * 1e-3`` are skipped, as are missing cells.
    The log-likelihood is the prediction-error decomposition over the
    observed cells, including the log(2π) constant.
    """
    _check_inputs(panel, params)
    X = panel.filled(0.0)
    Lam = np.ascontiguousarray(params.loadings)
    A = np.ascontiguousarray(params.var_coef)
    (a_pred, P_pred, a_filt, P_filt, v, C, K, used,
     loglik, err_t, err_i, err_c, n_skipped) = _univariate_pass(
        X, panel.mask, Lam, A, np.ascontiguousarray(params.state_cov),
        np.ascontiguousarray(params.idio_var), np.ascontiguousarray(params.init_mean),
        np.ascontiguousarray(params.init_cov), variance_floor * 1e-3)
    if err_t >= 0:
        raise KalmanBreakdown(int(err_t) + 1, int(err_i) + 1, float(err_c))
    a_sm, P_sm, a0_sm, P0_sm = _univariate_smooth(
        Lam, A, np.ascontiguousarray(params.init_mean), np.ascontiguousarray(params.init_cov),
        a_pred, P_pred, v, C, K, used)
    lag = lag_one_cov(P_sm, P_pred, P_filt, params.var_coef, params.init_cov)
    return SmootherOutput(
        smoothed_mean=a_sm, smoothed_cov=P_sm, lag_cov=lag,
        filtered_mean=a_filt, filtered_cov=P_filt,
        predicted_mean=a_pred, predicted_cov=P_pred,
        init_mean=a0_sm, init_cov=P0_sm,
        loglik=float(loglik), n_skipped=int(n_skipped),
    )


def multivariate_filter_smooth(panel: TimeSeriesPanel, params: DfmParams) -> SmootherOutput:
    """Textbook vector Kalman filter + RTS smoother, deleting missing rows of Λ and X.

    Slow; intended as a cross-check of :func:`filter_smooth`.  Lag-one
    covariances come from the RTS gain, P_{t,t-1|n} = P_{t|n} G_{t-1}ᵀ.
    """
    _check_inputs(panel, params)
    n, p, r = panel.n, panel.p, params.r
    Lam, A, Q = params.loadings, params.var_coef, params.state_cov
    a_pred = np.zeros((n, r))
    P_pred = np.zeros((n, r, r))
    a_filt = np.zeros((n, r))
    P_filt = np.zeros((n, r, r))
    loglik = 0.0
    a, P = params.init_mean, params.init_cov
    for t in range(n):
        a = A @ a
        P = A @ P @ A.T + Q
        a_pred[t], P_pred[t] = a, P
        idx = np.flatnonzero(panel.mask[t])
        if idx.size:
            Z = Lam[idx]
            F = Z @ P @ Z.T + np.diag(params.idio_var[idx])
            v = panel.values[t, idx] - Z @ a
            cF = np.linalg.cholesky(F)
            w = np.linalg.solve(cF, v)
            loglik -= 0.5 * (idx.size * LOG_2PI + 2.0 * np.sum(np.log(np.diag(cF))) + w @ w)
            K = np.linalg.solve(F, Z @ P).T
            a = a + K @ v
            P = P - K @ Z @ P
        a_filt[t], P_filt[t] = a, P

    a_sm = np.zeros((n, r))
    P_sm = np.zeros((n, r, r))
    lag = np.zeros((n, r, r))
    a_sm[-1], P_sm[-1] = a_filt[-1], P_filt[-1]
    for t in range(n - 2, -1, -1):
        G = np.linalg.solve(P_pred[t + 1], A @ P_filt[t]).T
        a_sm[t] = a_filt[t] + G @ (a_sm[t + 1] - a_pred[t + 1])
        P_sm[t] = P_filt[t] + G @ (P_sm[t + 1] - P_pred[t + 1]) @ G.T
        lag[t + 1] = P_sm[t + 1] @ G.T
    G0 = np.linalg.solve(P_pred[0], A @ params.init_cov).T
    a0 = params.init_mean + G0 @ (a_sm[0] - a_pred[0])
    P0 = params.init_cov + G0 @ (P_sm[0] - P_pred[0]) @ G0.T
    lag[0] = P_sm[0] @ G0.T
    return SmootherOutput(
        smoothed_mean=a_sm, smoothed_cov=P_sm, lag_cov=lag,
        filtered_mean=a_filt, filtered_cov=P_filt,
        predicted_mean=a_pred, predicted_cov=P_pred,
        init_mean=a0, init_cov=P0, loglik=float(loglik),
    )


@dataclass(frozen=True)
class Forecast:
    factor_mean: np.ndarray   # (h, r)
    factor_cov: np.ndarray    # (h, r, r)
    obs_mean: np.ndarray      # (h, p)
    obs_var: np.ndarray       # (h, p)


def forecast(params: DfmParams, state: np.ndarray, state_cov: np.ndarray, horizon: int) -> Forecast:
    """Iterate the state equation ``horizon`` steps ahead of a filtered state."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    state = np.asarray(state, dtype=float)
    state_cov = np.asarray(state_cov, dtype=float)
    r = params.r
    if state.shape != (r,) or state_cov.shape != (r, r):
        raise ValueError(f"state must have shape ({r},) and covariance ({r}, {r})")
    A, Lam = params.var_coef, params.loadings
    means = np.empty((horizon, r))
    covs = np.empty((horizon, r, r))
    m, P = state, state_cov
    for h in range(horizon):
        m = A @ m
        P = symmetrise(A @ P @ A.T + params.state_cov)
        means[h], covs[h] = m, P
    obs_mean = means @ Lam.T
    obs_var = np.einsum("ik,hkl,il->hi", Lam, covs, Lam) + params.idio_var
    return Forecast(means, covs, obs_mean, obs_var)
