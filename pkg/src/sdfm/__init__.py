"""Sparse dynamic factor models: univariate Kalman smoothing, EM with an ADMM L1 loading step, tuning and simulation tools."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.1.0"

from .core import DataError, DfmParams, FitConfig, KalmanBreakdown, SmootherOutput, TimeSeriesPanel, destandardise, standardise
from .em import FitResult, fit, impute, initialise
from .kalman import filter_smooth, forecast
from .tuning import TuningReport, select_alpha, select_num_factors, tune

__all__ = [
    "DataError", "DfmParams", "FitConfig", "FitResult", "KalmanBreakdown", "SmootherOutput", "TimeSeriesPanel",
    "TuningReport", "destandardise", "filter_smooth", "fit", "forecast", "impute", "initialise", "select_alpha",
    "select_num_factors", "standardise", "tune",
]
