"""Probabilistic spatio-temporal SWE forecasting: an attention encoder
feeding a coregionalized Gaussian-process head, a raw-feature GP
baseline, and the evaluation metrics."""

from .errors import ConfigError, DataError, ForeSWEError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "ForeSWEError", "NumericalError", "__version__"]
