"""Synthetic data, loading-recovery metrics, the AR(1) benchmark and the rotation example."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .core import DfmParams, TimeSeriesPanel, standardise

ZERO_TOL = 1e-8


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator, one stream per seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class DgpSpec:
    """Two-factor block design: Λ = I_2 ⊗ 1_{p/2}, A = [[a, 0], [rho, 0]], Σε = I.

    Σu = diag(1 - a², 1 - rho²) keeps both factors at unit variance.
    """

    n: int
    p: int
    rho: float = 0.0
    a: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 2 or self.p % 2:
            raise ValueError("need n >= 2 and an even p >= 2")
        if not (self.a ** 2 < 1 and self.rho ** 2 < 1):
            raise ValueError("need a² < 1 and rho² < 1")

    def params(self) -> DfmParams:
        h = self.p // 2
        Lam = np.kron(np.eye(2), np.ones((h, 1)))
        A = np.array([[self.a, 0.0], [self.rho, 0.0]])
        Su = np.diag([1.0 - self.a ** 2, 1.0 - self.rho ** 2])
        return DfmParams(Lam, A, np.ones(self.p), Su, np.zeros(2), stationary_cov(A, Su))


def block_params(p: int, r: int, a: float = 0.8) -> DfmParams:
    """Λ = I_r ⊗ 1_{p/r}, A = a I, Σu = (1 - a²) I, Σε = I (used for timing runs)."""
    if p % r:
        raise ValueError("p must be a multiple of r")
    Lam = np.kron(np.eye(r), np.ones((p // r, 1)))
    A = a * np.eye(r)
    Su = (1 - a ** 2) * np.eye(r)
    return DfmParams(Lam, A, np.ones(p), Su, np.zeros(r), np.eye(r))


def stationary_cov(A: np.ndarray, Su: np.ndarray) -> np.ndarray:
    """Solve Σ = A Σ Aᵀ + Σu."""
    return solve_discrete_lyapunov(np.asarray(A, dtype=float), np.asarray(Su, dtype=float))


@dataclass(frozen=True)
class SimulatedData:
    raw: np.ndarray         # (n, p), original scale
    panel: TimeSeriesPanel  # standardised version of raw
    loadings: np.ndarray    # (p, r)
    factors: np.ndarray     # (n, r)


def simulate_params(params: DfmParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (X, F) from the state-space model with a stationary F_0."""
    r, p = params.r, params.p
    Sf = stationary_cov(params.var_coef, params.state_cov)
    cu = np.linalg.cholesky(params.state_cov)
    f = np.linalg.cholesky(Sf) @ rng.standard_normal(r)
    F = np.empty((n, r))
    for t in range(n):
        f = params.var_coef @ f + cu @ rng.standard_normal(r)
        F[t] = f
    X = F @ params.loadings.T + rng.standard_normal((n, p)) * np.sqrt(params.idio_var)
    return X, F


def simulate(spec: DgpSpec) -> SimulatedData:
    params = spec.params()
    X, F = simulate_params(params, spec.n, make_rng(spec.seed))
    return SimulatedData(X, standardise(X), params.loadings, F)


def align_loadings(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Rescale, permute and sign-flip the columns of ``est`` to best match ``truth``.

    The estimate is scaled to the Frobenius norm of the truth, then
    columns are matched greedily by smallest 2-norm distance (allowing a
    sign flip), each true column being claimed once.
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError("shapes differ")
    norm = np.linalg.norm(est)
    if norm > 0:
        est = est * (np.linalg.norm(truth) / norm)
    r = truth.shape[1]
    d_plus = np.linalg.norm(est[:, :, None] - truth[:, None, :], axis=0)
    d_minus = np.linalg.norm(est[:, :, None] + truth[:, None, :], axis=0)
    dist = np.minimum(d_plus, d_minus)
    out = np.zeros_like(est)
    free_est, free_true = set(range(r)), set(range(r))
    for _ in range(r):
        j, k = min(((j, k) for j in free_est for k in free_true), key=lambda jk: (dist[jk], jk))
        out[:, k] = -est[:, j] if d_minus[j, k] < d_plus[j, k] else est[:, j]
        free_est.discard(j)
        free_true.discard(k)
    return out


def loading_mae(est: np.ndarray, truth: np.ndarray) -> float:
    return float(np.abs(np.asarray(est) - np.asarray(truth)).sum() / np.size(truth))


def support_f1(est: np.ndarray, truth: np.ndarray, zero_tol: float = ZERO_TOL) -> float:
    if zero_tol < 0:
        raise ValueError("zero_tol must be nonnegative")
    pred = np.abs(est) > zero_tol
    true = np.abs(truth) > zero_tol
    tp = np.sum(pred & true)
    precision = tp / pred.sum() if pred.any() else 0.0
    recall = tp / true.sum() if true.any() else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def fit_ar1(series: np.ndarray, min_obs: int = 10) -> float:
    """Least-squares AR(1) coefficient (no intercept) from consecutive observed pairs."""
    x = np.asarray(series, dtype=float)
    if np.sum(~np.isnan(x)) < min_obs:
        raise ValueError(f"need at least {min_obs} observed points")
    x0, x1 = x[:-1], x[1:]
    ok = ~np.isnan(x0) & ~np.isnan(x1)
    den = float(x0[ok] @ x0[ok])
    return float(x0[ok] @ x1[ok]) / den if den > 0 else 0.0


def ar1_forecast(series: np.ndarray, horizon: int, min_obs: int = 10) -> np.ndarray:
    """Forecasts for the ``horizon`` periods following the last observed value."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    x = np.asarray(series, dtype=float)
    phi = fit_ar1(x, min_obs)
    last = x[np.flatnonzero(~np.isnan(x))[-1]]
    return last * phi ** np.arange(1, horizon + 1)


def ar1_baseline(panel: TimeSeriesPanel, i: int, horizon: int) -> np.ndarray:
    """AR(1) forecasts of series ``i`` in standardised units."""
    return ar1_forecast(panel.values[:, i], horizon)


def rotation_example() -> np.ndarray:
    """10 x 2 loadings: first column five ones then zeros, second column one minus the first."""
    first = np.r_[np.ones(5), np.zeros(5)]
    return np.column_stack([first, 1.0 - first])


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def entry_norm(M: np.ndarray, q: int, zero_tol: float = ZERO_TOL) -> float:
    if q == 0:
        return float(np.count_nonzero(np.abs(M) > zero_tol))
    if q == 1:
        return float(np.abs(M).sum())
    if q == 2:
        return float(np.sqrt(np.sum(M ** 2)))
    raise ValueError("q must be 0, 1 or 2")


def rotation_norm_curve(q: int, thetas, zero_tol: float = ZERO_TOL) -> list[tuple[float, float]]:
    """ℓ_q size of the rotated example loadings for each angle in ``thetas``."""
    base = rotation_example()
    out = []
    for th in thetas:
        th = float(th)
        if not -np.pi < th <= np.pi:
            raise ValueError("angles must lie in (-pi, pi]")
        out.append((th, entry_norm(base @ rotation_matrix(th), q, zero_tol)))
    return out


def signed_permutations(r: int):
    """All r! 2^r signed permutation matrices."""
    for perm in itertools.permutations(range(r)):
        for signs in itertools.product((1.0, -1.0), repeat=r):
            M = np.zeros((r, r))
            M[list(perm), range(r)] = signs
            yield M


def block_missing_columns(p: int, fraction: float) -> np.ndarray:
    """Indices of the first ``fraction`` of each of the two loading blocks."""
    h = p // 2
    k = int(round(fraction * h))
    return np.r_[np.arange(k), h + np.arange(k)].astype(int)
