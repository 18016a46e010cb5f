"""Extreme conditional quantiles from quantile regression, GPD tails and B-spline interpolation."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConvergenceFailure,
    DegenerateFeature,
    DomainError,
    EmiError,
    InsufficientData,
    InsufficientExceedances,
    OfflineFitFailure,
    RankDeficient,
    SingularSystem,
)
from .emi import EmiConfig, EmiModel, Prediction, fit_offline, load_model, predict, predict_stream, save_model  # noqa: E402

__all__ = [
    "ConvergenceFailure",
    "DegenerateFeature",
    "DomainError",
    "EmiConfig",
    "EmiError",
    "EmiModel",
    "InsufficientData",
    "InsufficientExceedances",
    "OfflineFitFailure",
    "Prediction",
    "RankDeficient",
    "SingularSystem",
    "fit_offline",
    "load_model",
    "predict",
    "predict_stream",
    "save_model",
]
