"""Command-line interface: ``sdfm {fit,tune,forecast,impute,simulate,benchmark}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 EM did not converge
(outputs are still written and flagged in the manifest).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, em, experiments, kalman, sim, tuning
from .core import DataError, DfmParams, FitConfig, TimeSeriesPanel, destandardise, standardise

log = logging.getLogger("sdfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOT_CONVERGED = 0, 2, 3, 4
THREADS_ENV = "SDFM_THREADS"
MANIFEST = "manifest.json"


class CsvFormatError(DataError):
    """Malformed input CSV; the message carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ panel CSV

@dataclass(frozen=True)
class PanelCsv:
    index: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray  # NaN where the cell was empty


def fmt(x: float) -> str:
    """17 significant digits; NaN as an empty cell."""
    x = float(x)
    return "" if np.isnan(x) else format(x, ".17g")


def read_panel_csv(path) -> PanelCsv:
    """Header row ``index,name1,...``; first column a time index; empty cells are missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(1, "empty file")
    header = rows[0]
    if len(header) < 2:
        raise CsvFormatError(1, "header needs a time-index column and at least one series")
    names = tuple(h.strip() for h in header[1:])
    if any(not nm for nm in names):
        raise CsvFormatError(1, "empty series name in header")
    if len(set(names)) != len(names):
        raise CsvFormatError(1, "duplicate series names in header")
    index, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CsvFormatError(lineno, f"expected {len(header)} fields, found {len(row)}")
        t = row[0].strip()
        if not t:
            raise CsvFormatError(lineno, "empty time index")
        _check_time_index(t, lineno)
        vals = []
        for col, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if not cell:
                vals.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(lineno, f"column {col} ({names[col - 2]!r}): not a number: {cell!r}") from None
            if not np.isfinite(v):
                raise CsvFormatError(lineno, f"column {col} ({names[col - 2]!r}): non-finite value {cell!r}")
            vals.append(v)
        index.append(t)
        data.append(vals)
    if not data:
        raise CsvFormatError(2, "no data rows")
    if len(set(index)) != len(index):
        raise DataError("duplicate time index values")
    return PanelCsv(tuple(index), names, np.array(data, dtype=float))


def _check_time_index(t: str, lineno: int) -> None:
    from datetime import date, datetime

    try:
        int(t)
        return
    except ValueError:
        pass
    for parse in (date.fromisoformat, datetime.fromisoformat):
        try:
            parse(t)
            return
        except ValueError:
            continue
    raise CsvFormatError(lineno, f"time index {t!r} is neither an integer nor ISO-8601")


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(c) if isinstance(c, (float, np.floating)) else c for c in row])
    return buf.getvalue()


def write_panel_csv(path: Path, index, names, values) -> None:
    rows = [[t, *[fmt(v) for v in row]] for t, row in zip(index, np.asarray(values, dtype=float))]
    write_atomic(path, csv_text(["t", *names], rows))


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


# ------------------------------------------------------------------ manifest

def write_manifest(out: Path, args: argparse.Namespace, config: dict, converged, started: float) -> None:
    manifest = {
        "subcommand": args.command,
        "input": getattr(args, "input", None),
        "config": config,
        "version": __version__,
        "converged": converged,
        "wall_time_seconds": time.perf_counter() - started,
    }
    write_atomic(out / MANIFEST, json_text(manifest))


# ------------------------------------------------------------------ fitting

def _fit_config(args, r: int, alpha: float) -> FitConfig:
    return FitConfig(num_factors=r, alpha=alpha, admm_nu=args.nu, em_max_iter=args.em_max_iter,
                     em_tol=args.em_tol, admm_max_iter=args.admm_max_iter, admm_tol_abs=args.admm_tol_abs,
                     admm_tol_rel=args.admm_tol_rel)


def run_fit(args, panel: TimeSeriesPanel) -> tuple[em.FitResult, dict]:
    """Fit with fixed or selected r and α; returns the result and a config/tuning echo."""
    echo = {"em_tol": args.em_tol, "em_max_iter": args.em_max_iter, "admm_nu": args.nu,
            "admm_max_iter": args.admm_max_iter, "admm_tol_abs": args.admm_tol_abs,
            "admm_tol_rel": args.admm_tol_rel}
    if args.auto_r:
        rep = tuning.select_num_factors(panel, min(args.r_max, panel.n, panel.p))
        r = rep.chosen_r
        echo["r_max"] = args.r_max
        echo["ic"] = {str(k): v for k, v in rep.ic_values.items()}
    else:
        r = args.r
    echo["r"] = r
    if args.auto_alpha:
        grid = tuning.alpha_grid(args.alpha_points, args.alpha_min, args.alpha_max)
        rep_a = tuning.select_alpha(panel, r, grid=grid, base_config=_fit_config(args, r, 0.0))
        result = rep_a.best_fit
        echo["alpha_grid"] = list(grid)
        echo["bic"] = [[a, rep_a.bic_values.get(a)] for a in grid if a in rep_a.bic_values]
        echo["terminated_early"] = rep_a.terminated_early
        alpha = rep_a.chosen_alpha
    else:
        alpha = args.alpha
        result = em.fit(panel, _fit_config(args, r, alpha))
    echo["alpha"] = alpha
    return result, echo


def write_fit_outputs(out: Path, data: PanelCsv, panel: TimeSeriesPanel, result: em.FitResult) -> None:
    prm = result.params
    r = prm.r
    fnames = [f"F{k + 1}" for k in range(r)]
    write_atomic(out / "loadings.csv",
                 csv_text(["series", *fnames], [[nm, *map(float, row)] for nm, row in zip(data.names, prm.loadings)]))
    sm = result.factors
    write_atomic(out / "factors.csv",
                 csv_text(["t", *fnames], [[t, *map(float, row)] for t, row in zip(data.index, sm.smoothed_mean)]))
    cov_cols = [f"cov_{k + 1}_{m + 1}" for k in range(r) for m in range(k, r)]
    iu = np.triu_indices(r)
    write_atomic(out / "factor_cov.csv",
                 csv_text(["t", *cov_cols], [[t, *map(float, P[iu])] for t, P in zip(data.index, sm.smoothed_cov)]))
    write_atomic(out / "objective_trace.csv",
                 csv_text(["iteration", "objective"], [[k, float(v)] for k, v in enumerate(result.objective_trace)]))
    params = {
        "r": r,
        "alpha": result.alpha_used,
        "series": list(data.names),
        "index": list(data.index),
        "means": panel.means,
        "sds": panel.sds,
        "loadings": prm.loadings,
        "var_coef": prm.var_coef,
        "state_cov": prm.state_cov,
        "idio_var": prm.idio_var,
        "init_mean": prm.init_mean,
        "init_cov": prm.init_cov,
        "last_filtered_mean": sm.filtered_mean[-1],
        "last_filtered_cov": sm.filtered_cov[-1],
        "loglik": sm.loglik,
        "objective": result.objective,
        "em_iterations": result.em_iterations,
        "converged": result.converged,
        "nonzero_counts": list(result.nonzero_counts),
    }
    write_atomic(out / "params.json", json_text(params))


def load_model(model_dir: Path) -> tuple[dict, DfmParams]:
    path = Path(model_dir) / "params.json"
    if not path.is_file():
        raise UsageError(f"no fitted model found at {path}")
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    prm = DfmParams(np.array(m["loadings"], float).reshape(-1, m["r"]), np.array(m["var_coef"], float),
                    np.array(m["idio_var"], float), np.array(m["state_cov"], float),
                    np.array(m["init_mean"], float), np.array(m["init_cov"], float))
    return m, prm


def _load_panel(path) -> tuple[PanelCsv, TimeSeriesPanel]:
    data = read_panel_csv(path)
    return data, standardise(data.values, data.names)


def cmd_fit(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    data, panel = _load_panel(args.input)
    result, echo = run_fit(args, panel)
    write_fit_outputs(out, data, panel, result)
    write_manifest(out, args, echo, result.converged, started)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_tune(args) -> int:
    """Only the selection criteria: IC over r, then BIC over the α grid."""
    started = time.perf_counter()
    out = Path(args.out)
    _, panel = _load_panel(args.input)
    rep_r = tuning.select_num_factors(panel, min(args.r_max, panel.n, panel.p))
    grid = tuning.alpha_grid(args.alpha_points, args.alpha_min, args.alpha_max)
    cfg = _fit_config(args, rep_r.chosen_r, 0.0)
    rep_a = tuning.select_alpha(panel, rep_r.chosen_r, grid=grid, base_config=cfg)
    write_atomic(out / "ic.csv", csv_text(["r", "ic"], [[k, float(v)] for k, v in rep_r.ic_values.items()]))
    write_atomic(out / "bic.csv", csv_text(
        ["alpha", "bic", "nonzeros", "converged"],
        [[float(a), float(rep_a.bic_values[a]), sum(rep_a.fits[a].nonzero_counts), int(rep_a.fits[a].converged)]
         for a in grid if a in rep_a.bic_values]))
    echo = {"r_max": args.r_max, "chosen_r": rep_r.chosen_r, "alpha_grid": list(grid),
            "chosen_alpha": rep_a.chosen_alpha, "terminated_early": rep_a.terminated_early,
            "failures": {str(k): v for k, v in rep_a.failures.items()}}
    converged = all(f.converged for f in rep_a.fits.values())
    write_manifest(out, args, echo, converged, started)
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_impute(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    data, panel = _load_panel(args.input)
    result, echo = run_fit(args, panel)
    write_fit_outputs(out, data, panel, result)
    filled = em.impute(result, panel, original_scale=True)
    # observed cells are copied from the input so they survive bit for bit
    filled = np.where(panel.mask, data.values, filled)
    write_panel_csv(out / "imputed.csv", data.index, data.names, filled)
    write_manifest(out, args, echo, result.converged, started)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def forecast_labels(index, horizon: int) -> list[str]:
    """Integer indices continue by one per step; other indices get a ``last+k`` label."""
    last = index[-1]
    try:
        k0 = int(last)
        return [str(k0 + h) for h in range(1, horizon + 1)]
    except ValueError:
        return [f"{last}+{h}" for h in range(1, horizon + 1)]


def cmd_forecast(args) -> int:
    started = time.perf_counter()
    if args.horizon < 1:
        raise UsageError("--horizon must be at least 1")
    model, prm = load_model(Path(args.model))
    fc = kalman.forecast(prm, np.array(model["last_filtered_mean"], float),
                         np.array(model["last_filtered_cov"], float).reshape(prm.r, prm.r), args.horizon)
    means, sds = np.array(model["means"], float), np.array(model["sds"], float)
    mean = fc.obs_mean * sds + means
    half = 1.96 * np.sqrt(fc.obs_var) * sds
    rows = []
    for h, t in enumerate(forecast_labels(model["index"], args.horizon)):
        for i, nm in enumerate(model["series"]):
            rows.append([t, nm, float(mean[h, i]), float(mean[h, i] - half[h, i]), float(mean[h, i] + half[h, i])])
    out = Path(args.out) if args.out else Path(args.model)
    write_atomic(out / "forecast.csv", csv_text(["t", "series", "mean", "lower95", "upper95"], rows))
    if out != Path(args.model):
        write_manifest(out, args, {"model": str(args.model), "horizon": args.horizon}, True, started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    spec = sim.DgpSpec(args.n, args.p, args.rho, args.a, args.seed)
    data = sim.simulate(spec)
    out = Path(args.out)
    names = [f"x{i + 1}" for i in range(args.p)]
    index = [str(t + 1) for t in range(args.n)]
    raw = data.raw.copy()
    if args.missing > 0:
        rng = sim.make_rng(experiments.replicate_seed(args.seed, 1))
        raw[rng.random(raw.shape) < args.missing] = np.nan
    write_panel_csv(out / "data.csv", index, names, raw)
    write_atomic(out / "true_loadings.csv",
                 csv_text(["series", "F1", "F2"], [[nm, *map(float, row)] for nm, row in zip(names, data.loadings)]))
    write_atomic(out / "true_factors.csv",
                 csv_text(["t", "F1", "F2"], [[t, *map(float, row)] for t, row in zip(index, data.factors)]))
    write_manifest(out, args, {"n": args.n, "p": args.p, "rho": args.rho, "a": args.a, "seed": args.seed,
                               "missing": args.missing}, True, started)
    return EXIT_OK


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def write_report(out: Path, report: experiments.ExperimentReport) -> None:
    fields = [k for k in report.rows[0]] if report.rows else []
    write_atomic(out / f"{report.name}.csv",
                 csv_text(fields, [[row[k] for k in fields] for row in report.rows]))
    summary = [{"config": dict(zip(report.key_fields, cfg)),
                "quantiles": {m: dict(zip(("q25", "q50", "q75"), qs)) for m, qs in stats.items()}}
               for cfg, stats in report.summary.items()]
    write_atomic(out / f"{report.name}_summary.json",
                 json_text({"experiment": report.name, "quantile_levels": list(experiments.QUANTILES),
                            "failures": report.failures, "configurations": summary}))
    if report.summary:
        header = [*report.key_fields, *(f"{m}_{q}" for m in report.metric_fields for q in ("q25", "q50", "q75"))]
        rows = [[*cfg, *(stats[m][j] for m in report.metric_fields for j in range(3))]
                for cfg, stats in report.summary.items()]
        write_atomic(out / f"{report.name}_quantiles.csv",
                     csv_text(header, [[float(c) if isinstance(c, float) else c for c in row] for row in rows]))


def cmd_benchmark(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    workers = args.workers
    exp = args.experiment
    if exp == "recovery":
        echo = {"n": args.n or 100, "p": list(_ints(args.p or "18,60,120")),
                "rho": list(_floats(args.rho or "0,0.6")), "reps": args.reps, "seed": args.seed, "a": args.a}
        report = experiments.recovery_experiment(echo["n"], echo["p"], echo["rho"], args.reps, args.seed, args.a,
                                                 workers)
    elif exp == "forecast":
        echo = {"n": args.n or 200, "p": (_ints(args.p) or (64,))[0], "rho": list(_floats(args.rho or "0,0.6,0.9")),
                "missing": list(experiments.MISSING_FRACTIONS), "reps": args.reps, "seed": args.seed, "a": args.a}
        report = experiments.forecast_experiment(echo["n"], echo["p"], echo["rho"], reps=args.reps,
                                                 seed=args.seed, a=args.a, workers=workers)
    elif exp == "timing":
        echo = {"n": args.n or 100, "p": list(_ints(args.p) if args.p else experiments.TIMING_PS),
                "r": list(_ints(args.r) if args.r else experiments.TIMING_RS), "reps": args.reps, "seed": args.seed}
        report = experiments.timing_experiment(echo["n"], echo["p"], echo["r"], args.reps, seed=args.seed,
                                               workers=workers)
    else:
        echo = {"points": args.points}
        report = experiments.rotation_experiment(args.points)
    write_report(out, report)
    write_manifest(out, args, {"experiment": exp, **echo}, True, started)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_fit_flags(sp: argparse.ArgumentParser, selection: bool = True) -> None:
    if selection:
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("-r", type=int, help="number of factors")
        g.add_argument("--auto-r", action="store_true", help="choose r by the information criterion")
        ga = sp.add_mutually_exclusive_group()
        ga.add_argument("--alpha", type=float, default=0.0, help="L1 weight on the loadings (default 0)")
        ga.add_argument("--auto-alpha", action="store_true", help="choose the L1 weight by BIC")
    sp.add_argument("--r-max", type=int, default=10)
    sp.add_argument("--alpha-min", type=float, default=tuning.ALPHA_MIN)
    sp.add_argument("--alpha-max", type=float, default=tuning.ALPHA_MAX)
    sp.add_argument("--alpha-points", type=int, default=tuning.ALPHA_POINTS)
    sp.add_argument("--em-tol", type=float, default=1e-4)
    sp.add_argument("--em-max-iter", type=int, default=100)
    sp.add_argument("--nu", type=float, default=1.0, help="ADMM step parameter")
    sp.add_argument("--admm-max-iter", type=int, default=2000)
    sp.add_argument("--admm-tol-abs", type=float, default=1e-6)
    sp.add_argument("--admm-tol-rel", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdfm", description="Sparse dynamic factor models estimated by EM.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit", help="fit a model to a panel CSV")
    sp.add_argument("input")
    sp.add_argument("-o", "--out", required=True, help="output directory")
    _add_fit_flags(sp)

    sp = sub.add_parser("tune", help="report the factor-count and L1-weight selection criteria")
    sp.add_argument("input")
    sp.add_argument("-o", "--out", required=True)
    _add_fit_flags(sp, selection=False)

    sp = sub.add_parser("impute", help="fit, then fill missing cells by the common component")
    sp.add_argument("input")
    sp.add_argument("-o", "--out", required=True)
    _add_fit_flags(sp)

    sp = sub.add_parser("forecast", help="forecast from a fitted model directory")
    sp.add_argument("model", help="directory written by 'fit'")
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("-o", "--out", help="output directory (default: the model directory)")

    sp = sub.add_parser("simulate", help="draw a panel from the two-factor block design")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--p", type=int, default=60)
    sp.add_argument("--rho", type=float, default=0.0)
    sp.add_argument("--a", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--missing", type=float, default=0.0, help="share of cells removed at random")
    sp.add_argument("-o", "--out", required=True)

    sp = sub.add_parser("benchmark", help="run a Monte-Carlo experiment")
    sp.add_argument("--experiment", required=True, choices=("recovery", "forecast", "timing", "rotation"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--p", help="comma-separated cross-section sizes")
    sp.add_argument("--r", help="comma-separated factor counts (timing)")
    sp.add_argument("--rho", help="comma-separated rho values")
    sp.add_argument("--a", type=float, default=0.8)
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=int, default=361, help="angle grid size (rotation)")
    sp.add_argument("--workers", type=int, default=int(os.environ.get(THREADS_ENV, "1") or 1),
                    help=f"parallel replicate workers (default ${THREADS_ENV} or 1)")
    sp.add_argument("-o", "--out", required=True)
    return ap


COMMANDS = {"fit": cmd_fit, "tune": cmd_tune, "impute": cmd_impute, "forecast": cmd_forecast,
            "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sdfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"sdfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"sdfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"sdfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
