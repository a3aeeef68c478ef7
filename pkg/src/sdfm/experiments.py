"""Monte-Carlo experiments on the synthetic two-factor design.

Each experiment returns an :class:`ExperimentReport` holding one row per
replicate and configuration plus 25/50/75% quantiles per configuration
and metric.  Replicates are independent, seeded per replicate, and may be
run in a process pool; rows are sorted before aggregation so the result
does not depend on scheduling.
"""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import em, kalman, sim, tuning
from .core import FitConfig, TimeSeriesPanel, destandardise, standardise

log = logging.getLogger(__name__)

QUANTILES = (0.25, 0.5, 0.75)
MISSING_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class ExperimentReport:
    """Per-replicate rows and per-configuration quantiles.

    ``rows`` are dicts sharing the keys ``key_fields + metric_fields``.
    ``summary`` maps a configuration tuple to ``{metric: (q25, q50, q75)}``.
    """

    name: str
    key_fields: tuple[str, ...]
    metric_fields: tuple[str, ...]
    rows: tuple[dict, ...]
    summary: dict = field(default_factory=dict)
    failures: int = 0

    def median(self, metric: str, **key) -> float:
        cfg = tuple(key[k] for k in self.key_fields)
        return self.summary[cfg][metric][1]


def summarise(rows, key_fields, metric_fields) -> dict:
    """Quantiles of each metric within each configuration (NaN-valued rows ignored)."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in key_fields), []).append(row)
    out = {}
    for cfg in sorted(groups):
        stats = {}
        for m in metric_fields:
            vals = np.sort([row[m] for row in groups[cfg] if np.isfinite(row[m])])
            stats[m] = tuple(float(q) for q in np.quantile(vals, QUANTILES)) if vals.size else (np.nan,) * 3
        out[cfg] = stats
    return out


def _report(name, key_fields, metric_fields, rows, failures=0) -> ExperimentReport:
    rows = sorted(rows, key=lambda row: tuple(row[k] for k in key_fields) + (row["rep"],))
    return ExperimentReport(name, tuple(key_fields), tuple(metric_fields), tuple(rows),
                            summarise(rows, key_fields, metric_fields), failures)


def _run(fn, tasks, workers: int):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def replicate_seed(seed: int, *parts: int) -> int:
    """Deterministic per-replicate seed derived from the base seed and the configuration."""
    return int(np.random.SeedSequence([int(seed), *[int(x) for x in parts]]).generate_state(1)[0])


# ---------------------------------------------------------------- recovery

def _recovery_task(task) -> dict:
    n, p, rho, a, rep, seed, r = task
    data = sim.simulate(sim.DgpSpec(n, p, rho, a, seed))
    row = {"n": n, "p": p, "rho": rho, "rep": rep, "seed": seed}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            report = tuning.select_alpha(data.panel, r)
            sparse = report.best_fit
            dense = em.fit(data.panel, FitConfig(num_factors=r, alpha=0.0))
        except (FloatingPointError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            log.warning("recovery replicate %s failed: %s", task, exc)
            return {**row, "alpha": np.nan, "mae_sdfm": np.nan, "mae_dfm": np.nan, "f1_sdfm": np.nan,
                    "f1_dfm": np.nan, "failed": 1}
    est_s = sim.align_loadings(sparse.params.loadings, data.loadings)
    est_d = sim.align_loadings(dense.params.loadings, data.loadings)
    return {**row, "alpha": report.chosen_alpha,
            "mae_sdfm": sim.loading_mae(est_s, data.loadings),
            "mae_dfm": sim.loading_mae(est_d, data.loadings),
            "f1_sdfm": sim.support_f1(est_s, data.loadings),
            "f1_dfm": sim.support_f1(est_d, data.loadings),
            "failed": 0}


def recovery_experiment(n: int = 100, ps=(18, 60, 120), rhos=(0.0, 0.6), reps: int = 20, seed: int = 0,
                        a: float = 0.8, workers: int = 1) -> ExperimentReport:
    """Loading recovery of the BIC-tuned sparse fit against the unpenalised fit."""
    tasks = [(n, int(p), float(rho), a, rep, replicate_seed(seed, p, round(rho * 1000), rep), 2)
             for p in ps for rho in rhos for rep in range(reps)]
    rows = _run(_recovery_task, tasks, workers)
    failures = sum(row["failed"] for row in rows)
    return _report("recovery", ("rho", "p"), ("mae_sdfm", "mae_dfm", "f1_sdfm", "f1_dfm", "alpha"),
                   rows, failures)


# ---------------------------------------------------------------- forecast

def nowcast_last_row(result: em.FitResult) -> np.ndarray:
    """Estimate of the common component in the final period given all data (standardised units)."""
    return result.factors.smoothed_mean[-1] @ result.params.loadings.T


def _forecast_task(task) -> list[dict]:
    n, p, rho, a, rep, seed, fractions, r = task
    data = sim.simulate(sim.DgpSpec(n, p, rho, a, seed))
    truth = data.raw[-1]
    rows = []
    # α is tuned once per replicate with the whole final row withheld; that
    # panel is common to every missingness level, so the comparison across
    # levels is not confounded by the tuning path.
    raw_all_missing = data.raw.copy()
    raw_all_missing[-1] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            base = standardise(raw_all_missing)
            tuned = tuning.select_alpha(base, r)
            alpha = tuned.chosen_alpha
            init = tuned.best_fit.params
        except (FloatingPointError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            log.warning("forecast replicate %s failed: %s", task[:6], exc)
            return [{"n": n, "p": p, "rho": rho, "missing": f, "rep": rep, "seed": seed, "alpha": np.nan,
                     "mae_sdfm": np.nan, "mae_ar1": np.nan, "failed": 1} for f in fractions]
        for frac in fractions:
            cols = sim.block_missing_columns(p, frac)
            raw = data.raw.copy()
            raw[-1, cols] = np.nan
            panel = standardise(raw)
            fit = em.fit(panel, FitConfig(num_factors=r, alpha=alpha), init=init)
            pred_sdfm = destandardise(panel, nowcast_last_row(fit)[None, :])[0, cols]
            pred_ar1 = np.array([sim.ar1_forecast(raw[:-1, i], 1)[0] for i in cols])
            rows.append({"n": n, "p": p, "rho": rho, "missing": frac, "rep": rep, "seed": seed,
                         "alpha": alpha,
                         "mae_sdfm": float(np.mean(np.abs(pred_sdfm - truth[cols]))),
                         "mae_ar1": float(np.mean(np.abs(pred_ar1 - truth[cols]))),
                         "failed": 0})
    return rows


def forecast_experiment(n: int = 200, p: int = 64, rhos=(0.0, 0.6, 0.9), fractions=MISSING_FRACTIONS,
                        reps: int = 20, seed: int = 0, a: float = 0.8, workers: int = 1) -> ExperimentReport:
    """Final-row prediction with the first share of each loading block withheld.

    The sparse model predicts the withheld cells by the smoothed common
    component; the baseline is a per-series AR(1) fitted to the earlier rows.
    Errors are measured on the original scale.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    fractions = tuple(float(f) for f in fractions)
    if not all(0 < f <= 1 for f in fractions):
        raise ValueError("missing fractions must lie in (0, 1]")
    tasks = [(n, p, float(rho), a, rep, replicate_seed(seed, p, round(rho * 1000), rep), fractions, 2)
             for rho in rhos for rep in range(reps)]
    rows = [row for chunk in _run(_forecast_task, tasks, workers) for row in chunk]
    failures = sum(row["failed"] for row in rows) // max(len(fractions), 1)
    return _report("forecast", ("rho", "missing"), ("mae_sdfm", "mae_ar1"), rows, failures)


# ---------------------------------------------------------------- timing

TIMING_PS = (64, 128, 256, 512)
TIMING_RS = (2, 4, 8)


def _timing_task(task) -> dict:
    n, p, r, rep, seed, iters = task
    params = sim.block_params(p, r)
    X, _ = sim.simulate_params(params, n, sim.make_rng(seed))
    panel = standardise(X)
    cfg = FitConfig(num_factors=r, alpha=0.1, em_max_iter=iters, em_tol=1e-300)
    start = time.perf_counter()
    res = em.fit(panel, cfg)
    elapsed = time.perf_counter() - start
    return {"p": p, "r": r, "rep": rep, "seed": seed, "em_iterations": res.em_iterations,
            "seconds_per_iteration": elapsed / max(res.em_iterations, 1)}


def timing_experiment(n: int = 100, ps=TIMING_PS, rs=TIMING_RS, reps: int = 3, iterations: int = 5,
                      seed: int = 0, workers: int = 1) -> ExperimentReport:
    """Wall-clock seconds per EM iteration on the block design with A = 0.8 I.

    Times are machine dependent; the table is a measurement, not a check.
    """
    tasks = [(n, int(p), int(r), rep, replicate_seed(seed, p, r, rep), iterations)
             for p in ps for r in rs if p % r == 0 for rep in range(reps)]
    rows = _run(_timing_task, tasks, workers)
    return _report("timing", ("p", "r"), ("seconds_per_iteration",), rows)


# ---------------------------------------------------------------- rotation

def rotation_experiment(points: int = 8 * 45 + 1) -> ExperimentReport:
    """ℓ0, ℓ1 and ℓ2 size of the rotated example loadings on an even grid over (-π, π].

    With ``points - 1`` divisible by 4 the grid contains 0, ±π/2 and π.
    """
    if points < 2:
        raise ValueError("need at least 2 grid points")
    thetas = np.linspace(-np.pi, np.pi, points)[1:]
    curves = {q: sim.rotation_norm_curve(q, thetas) for q in (0, 1, 2)}
    rows = [{"theta": float(th), "rep": 0, "l0": curves[0][k][1], "l1": curves[1][k][1], "l2": curves[2][k][1]}
            for k, th in enumerate(thetas)]
    return ExperimentReport("rotation", ("theta",), ("l0", "l1", "l2"), tuple(rows), {}, 0)


def forecast_coverage(params, n: int, reps: int, seed: int = 0) -> float:
    """Share of one-step 95% bands that cover the realised observation under known parameters."""
    hits = total = 0
    for rep in range(reps):
        rng = sim.make_rng(replicate_seed(seed, rep))
        X, _ = sim.simulate_params(params, n + 1, rng)
        p = params.p
        panel = TimeSeriesPanel(X[:n], np.ones((n, p), bool), np.zeros(p), np.ones(p), tuple(f"x{i}" for i in range(p)))
        sm = kalman.filter_smooth(panel, params)
        fc = kalman.forecast(params, sm.filtered_mean[-1], sm.filtered_cov[-1], 1)
        sd = np.sqrt(fc.obs_var[0])
        hits += int(np.sum(np.abs(X[n] - fc.obs_mean[0]) <= 1.96 * sd))
        total += p
    return hits / total
