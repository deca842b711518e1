"""Latent neural ODEs learned from noisy scalar time series.

A smooth fit u(t) of the measurements, a masked delay or autoencoder
embedding whose size is chosen by false nearest neighbours, and a vector
field du/dt = A(u) u are trained jointly; the result filters the series and
forecasts its continuation.
"""
from .config import ExperimentConfig, load_config
from .estimator import FNNDimensionEstimator, LatentODEForecaster
from .exceptions import (ConfigurationError, DegenerateError, DivergenceError, GraphError,
                         LatentDynError, NumericError, SamplingError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "load_config", "FNNDimensionEstimator", "LatentODEForecaster",
    "ConfigurationError", "DegenerateError", "DivergenceError", "GraphError",
    "LatentDynError", "NumericError", "SamplingError", "UsageError",
]
