"""IVIM parameter estimation with least squares and neural estimators."""

__version__ = "0.1.0"

from .errors import IvimError
from .model import (
    BValueSchedule,
    IvimParams,
    SignalCurve,
    geometric_trace_average,
    ivim_curve,
    ivim_signal,
    normalize_curve,
)

__all__ = [
    "BValueSchedule",
    "IvimError",
    "IvimParams",
    "SignalCurve",
    "geometric_trace_average",
    "ivim_curve",
    "ivim_signal",
    "normalize_curve",
]
