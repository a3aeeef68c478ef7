"""Choosing the number of factors and the L1 weight."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import em, mstep
from .core import FitConfig, TimeSeriesPanel

log = logging.getLogger(__name__)

ALPHA_MIN, ALPHA_MAX, ALPHA_POINTS = 1e-3, 1e2, 20


@dataclass(frozen=True)
class TuningReport:
    ic_values: dict = field(default_factory=dict)
    chosen_r: int | None = None
    alpha_grid: tuple = ()
    bic_values: dict = field(default_factory=dict)
    chosen_alpha: float | None = None
    terminated_early: bool = False
    fits: dict = field(default_factory=dict, compare=False, repr=False)
    failures: dict = field(default_factory=dict, compare=False)

    @property
    def best_fit(self) -> "em.FitResult | None":
        return self.fits.get(self.chosen_alpha)


def ic_penalty(n: int, p: int) -> float:
    """Per-factor penalty ((n + p) / (np)) log min(n, p)."""
    return (n + p) / (n * p) * np.log(min(n, p))


def median_window_fill(panel: TimeSeriesPanel, width: int = 3) -> np.ndarray:
    """Fill missing cells with the series median, then replace those cells by a centred moving average."""
    X = panel.values.copy()
    med = np.nanmedian(X, axis=0)
    X = np.where(panel.mask, X, med)
    if width > 1 and not panel.mask.all():
        half = width // 2
        padded = np.pad(X, ((half, half), (0, 0)), mode="edge")
        kernel = np.ones(width) / width
        smooth = np.stack([np.convolve(padded[:, i], kernel, mode="valid") for i in range(panel.p)], axis=1)
        X = np.where(panel.mask, X, smooth)
    return X


def select_num_factors(panel: TimeSeriesPanel, r_max: int, window: int = 3) -> TuningReport:
    """Minimise IC(r) = log V_r + r ((n+p)/(np)) log min(n, p) over r = 1..r_max.

    V_r is the mean squared residual of an r-component PCA of the
    median-filled, window-smoothed panel.
    """
    n, p = panel.n, panel.p
    if not 1 <= r_max <= min(n, p):
        raise ValueError(f"r_max must lie in 1..{min(n, p)}")
    X = median_window_fill(panel, window)
    _, _, w_all = em.pca(X, r_max)
    rank = int(np.sum(w_all > 1e-10 * max(w_all[0], 1e-300)))
    if r_max > rank:
        warnings.warn(f"r_max={r_max} exceeds numerical rank {rank}; truncating", RuntimeWarning, stacklevel=2)
        r_max = max(rank, 1)
    total = float(np.sum(X ** 2)) / (n * p)
    # residual mean square of a rank-r PCA: trailing eigenvalues of XᵀX/n, divided by p
    explained = np.cumsum(np.clip(w_all, 0.0, None)) / p
    pen = ic_penalty(n, p)
    ic = {}
    for r in range(1, r_max + 1):
        V = max(total - explained[r - 1], 1e-300)
        ic[r] = float(np.log(V) + r * pen)
    chosen = min(ic, key=lambda k: (ic[k], k))
    return TuningReport(ic_values=ic, chosen_r=chosen)


def alpha_grid(points: int = ALPHA_POINTS, lo: float = ALPHA_MIN, hi: float = ALPHA_MAX) -> tuple[float, ...]:
    if points < 2:
        raise ValueError("grid needs at least 2 points")
    return tuple(float(a) for a in np.logspace(np.log10(lo), np.log10(hi), points))


def residual_mean_square(panel: TimeSeriesPanel, result: "em.FitResult") -> float:
    """(1/np) Σ over observed cells of E[(X - Λ̂F)² | data], using smoothed moments."""
    stats = mstep.sufficient_stats(panel, result.factors)
    return float(mstep.expected_sq_resid(stats, result.params.loadings).sum() / (panel.n * panel.p))


def bic(panel: TimeSeriesPanel, result: "em.FitResult") -> float:
    npp = panel.n * panel.p
    return float(np.log(residual_mean_square(panel, result)) + np.log(npp) / npp * sum(result.nonzero_counts))


def select_alpha(panel: TimeSeriesPanel, r: int, grid=None, points: int = ALPHA_POINTS,
                 base_config: FitConfig | None = None, init=None) -> TuningReport:
    """BIC search over an ascending grid of L1 weights, warm-starting each fit from the previous one.

    The search stops after the first grid point at which some loading
    column is entirely zero.  Ties go to the larger weight.
    """
    grid = alpha_grid(points) if grid is None else tuple(float(a) for a in grid)
    if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("alpha grid must be strictly ascending with at least 2 points")
    if base_config is None:
        base_config = FitConfig(num_factors=r)
    elif base_config.num_factors != r:
        raise ValueError("base_config.num_factors must equal r")
    fits, bics, failures = {}, {}, {}
    prev = None
    terminated = False
    for alpha in grid:
        cfg = _with_alpha(base_config, alpha)
        try:
            res = em.fit(panel, cfg,
                         init=prev.params if prev is not None else init,
                         warm=prev.admm_state if prev is not None else None)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("fit failed at alpha=%g: %s", alpha, exc)
            failures[alpha] = str(exc)
            continue
        fits[alpha] = res
        bics[alpha] = bic(panel, res)
        prev = res
        if min(res.nonzero_counts) == 0:
            terminated = True
            break
    if not bics:
        raise RuntimeError(f"no alpha grid point could be fitted: {failures}")
    chosen = min(bics, key=lambda a: (bics[a], -a))
    return TuningReport(alpha_grid=grid, bic_values=bics, chosen_alpha=chosen,
                        terminated_early=terminated, fits=fits, failures=failures)


def tune(panel: TimeSeriesPanel, r_max: int, grid=None, base_config: FitConfig | None = None) -> TuningReport:
    """Choose r by IC, then alpha by BIC at that r."""
    rep_r = select_num_factors(panel, r_max)
    r = rep_r.chosen_r
    cfg = None if base_config is None else _with_r(base_config, r)
    rep_a = select_alpha(panel, r, grid=grid, base_config=cfg)
    return TuningReport(ic_values=rep_r.ic_values, chosen_r=r, alpha_grid=rep_a.alpha_grid,
                        bic_values=rep_a.bic_values, chosen_alpha=rep_a.chosen_alpha,
                        terminated_early=rep_a.terminated_early, fits=rep_a.fits, failures=rep_a.failures)


def _with_alpha(cfg: FitConfig, alpha: float) -> FitConfig:
    return FitConfig(**{**cfg.__dict__, "alpha": alpha})


def _with_r(cfg: FitConfig, r: int) -> FitConfig:
    return FitConfig(**{**cfg.__dict__, "num_factors": r})
