"""Shared domain types: the observation panel, model parameters and fit settings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VARIANCE_FLOOR = 1e-6


class DataError(ValueError):
    """Raised when an input panel cannot be used (constant/empty columns, NaNs, bad shapes)."""


class KalmanBreakdown(FloatingPointError):
    """Negative innovation variance encountered during univariate filtering."""

    def __init__(self, t: int, i: int, value: float):
        super().__init__(f"innovation variance {value:.3e} < 0 at t={t}, series={i}")
        self.t = t
        self.i = i


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeSeriesPanel:
    """Standardised n x p panel with an observation mask.

    Missing cells hold NaN in ``values``; ``mask`` is True where observed.
    ``means`` and ``sds`` are the original-scale statistics used to
    standardise each column.
    """

    values: np.ndarray
    mask: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    series_names: tuple[str, ...]

    def __post_init__(self):
        values = _frozen(self.values)
        mask = np.array(self.mask, dtype=bool, copy=True)
        mask.setflags(write=False)
        if values.ndim != 2 or values.shape != mask.shape:
            raise DataError(f"values {values.shape} and mask {mask.shape} must be equal 2-d shapes")
        p = values.shape[1]
        means = _frozen(self.means)
        sds = _frozen(self.sds)
        if means.shape != (p,) or sds.shape != (p,) or len(self.series_names) != p:
            raise DataError("means, sds and series_names must have one entry per column")
        if not np.all(sds > 0):
            raise DataError("standard deviations must be positive")
        empty = np.flatnonzero(~mask.any(axis=0))
        if empty.size:
            raise DataError(f"column {self.series_names[empty[0]]!r} has no observed entries")
        if not np.all(np.isfinite(values[mask])):
            raise DataError("observed entries must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sds", sds)
        object.__setattr__(self, "series_names", tuple(str(s) for s in self.series_names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with missing cells replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)

    def with_mask(self, mask: np.ndarray) -> "TimeSeriesPanel":
        """Same standardisation, fewer observed cells (``mask`` must be a subset)."""
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask & ~self.mask):
            raise DataError("new mask may only remove observations")
        values = np.where(mask, self.values, np.nan)
        return TimeSeriesPanel(values, mask, self.means, self.sds, self.series_names)


@dataclass(frozen=True)
class DfmParams:
    """Parameters of the exact DFM: X_t = Λ F_t + ε_t, F_t = A F_{t-1} + u_t, F_0 ~ N(α₀, P₀)."""

    loadings: np.ndarray
    var_coef: np.ndarray
    idio_var: np.ndarray
    state_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self):
        for name in ("loadings", "var_coef", "idio_var", "state_cov", "init_mean", "init_cov"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        p, r = self.loadings.shape
        if self.var_coef.shape != (r, r) or self.state_cov.shape != (r, r) or self.init_cov.shape != (r, r):
            raise ValueError("state matrices must be r x r")
        if self.idio_var.shape != (p,) or self.init_mean.shape != (r,):
            raise ValueError("idio_var must have length p and init_mean length r")

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def r(self) -> int:
        return self.loadings.shape[1]

    def replace(self, **changes) -> "DfmParams":
        fields = dict(
            loadings=self.loadings,
            var_coef=self.var_coef,
            idio_var=self.idio_var,
            state_cov=self.state_cov,
            init_mean=self.init_mean,
            init_cov=self.init_cov,
        )
        fields.update(changes)
        return DfmParams(**fields)

    def rotate(self, Q: np.ndarray) -> "DfmParams":
        """Reparametrise with factors Qᵀ F; leaves the likelihood unchanged for orthogonal Q."""
        Q = np.asarray(Q, dtype=float)
        return self.replace(
            loadings=self.loadings @ Q,
            var_coef=Q.T @ self.var_coef @ Q,
            state_cov=Q.T @ self.state_cov @ Q,
            init_mean=Q.T @ self.init_mean,
            init_cov=Q.T @ self.init_cov @ Q,
        )

    def scale_factors(self, d: np.ndarray) -> "DfmParams":
        """Reparametrise with factors D F for D = diag(d); the likelihood is unchanged."""
        d = np.asarray(d, dtype=float)
        D = np.outer(d, d)
        return self.replace(
            loadings=self.loadings / d,
            var_coef=self.var_coef * d[:, None] / d[None, :],
            state_cov=self.state_cov * D,
            init_mean=self.init_mean * d,
            init_cov=self.init_cov * D,
        )

    def with_unit_factor_variance(self, max_radius: float = 0.98) -> "DfmParams":
        """Rescale the factors to unit stationary variance.

        A non-stationary A is first shrunk to spectral radius ``max_radius``.
        Σu is then reset to R - A R Aᵀ with R the stationary correlation,
        so the constraint holds exactly rather than up to rounding.
        """
        from scipy.linalg import solve_discrete_lyapunov

        A = self.var_coef
        rad = self.spectral_radius()
        if rad >= max_radius:
            A = A * (max_radius / rad)
        Sf = symmetrise(solve_discrete_lyapunov(A, self.state_cov))
        out = self.replace(var_coef=A).scale_factors(1.0 / np.sqrt(np.diag(Sf)))
        d = np.sqrt(np.diag(Sf))
        R = Sf / np.outer(d, d)
        np.fill_diagonal(R, 1.0)
        A = out.var_coef
        return out.replace(state_cov=symmetrise(R - A @ R @ A.T))

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.var_coef))))


@dataclass(frozen=True)
class FitConfig:
    num_factors: int
    alpha: float = 0.0
    admm_nu: float = 1.0
    em_max_iter: int = 100
    em_tol: float = 1e-4
    admm_max_iter: int = 2000
    admm_tol_abs: float = 1e-6
    admm_tol_rel: float = 1e-4
    variance_floor: float = VARIANCE_FLOOR
    # hold the factors at unit stationary variance so the penalty cannot be dodged by rescaling them
    unit_factor_variance: bool = True

    def __post_init__(self):
        if self.num_factors < 1:
            raise ValueError("num_factors must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.admm_nu <= 0:
            raise ValueError("admm_nu must be positive")
        if self.em_max_iter < 1 or self.admm_max_iter < 1:
            raise ValueError("iteration limits must be positive")
        for name in ("em_tol", "admm_tol_abs", "admm_tol_rel", "variance_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def check_panel(self, panel: TimeSeriesPanel) -> None:
        if self.num_factors > min(panel.n, panel.p):
            raise ValueError(f"num_factors={self.num_factors} exceeds min(n, p)={min(panel.n, panel.p)}")


@dataclass(frozen=True)
class SmootherOutput:
    """Filtered and smoothed state moments.

    Arrays are indexed by t = 1..n along axis 0 (row 0 is t = 1).
    ``lag_cov[t]`` is Cov(F_t, F_{t-1} | all data); its first entry pairs
    F_1 with the pre-sample state F_0, whose smoothed moments are kept in
    ``init_mean``/``init_cov``.
    """

    smoothed_mean: np.ndarray
    smoothed_cov: np.ndarray
    lag_cov: np.ndarray
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    loglik: float
    n_skipped: int = 0

    @property
    def n(self) -> int:
        return self.smoothed_mean.shape[0]

    @property
    def r(self) -> int:
        return self.smoothed_mean.shape[1]


def standardise(raw: np.ndarray, names: Sequence[str] | None = None) -> TimeSeriesPanel:
    """Centre and scale each column over its observed (non-NaN) entries.

    Uses the sample standard deviation (ddof=1).
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise DataError("raw data must be a 2-d array")
    n, p = raw.shape
    if names is None:
        names = [f"x{i + 1}" for i in range(p)]
    names = [str(s) for s in names]
    if len(names) != p:
        raise DataError(f"{len(names)} names for {p} columns")
    if np.any(np.isinf(raw)):
        raise DataError("infinite values are not allowed")
    mask = ~np.isnan(raw)
    means = np.empty(p)
    sds = np.empty(p)
    for i in range(p):
        col = raw[mask[:, i], i]
        if col.size < 2:
            raise DataError(f"column {names[i]!r} has fewer than 2 observed values")
        means[i] = col.mean()
        sds[i] = col.std(ddof=1)
        if not sds[i] > 0 or sds[i] <= 1e-14 * max(1.0, abs(means[i])):
            raise DataError(f"constant column {names[i]!r}")
    values = np.where(mask, (raw - means) / sds, np.nan)
    return TimeSeriesPanel(values, mask, means, sds, tuple(names))


def destandardise(panel: TimeSeriesPanel, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != panel.p:
        raise ValueError(f"expected an m x {panel.p} matrix, got shape {values.shape}")
    return values * panel.sds + panel.means


def symmetrise(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def floor_eigenvalues(M: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrise ``M`` and clip its eigenvalues from below at ``floor``."""
    M = symmetrise(M)
    w, V = np.linalg.eigh(M)
    if w.min() >= floor:
        return M
    return symmetrise((V * np.maximum(w, floor)) @ V.T)
