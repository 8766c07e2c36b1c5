"""Interstitial lung disease patch classifier: a small NHWC convolutional
network written directly on numpy, with the patch pipeline, training loop,
metrics and command line around it."""

from . import data, metrics, model, nn, optim, tensor
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    DimensionError,
    IldError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "data", "metrics", "model", "nn", "optim", "tensor",
    "CheckpointError", "CheckpointShapeError", "CheckpointTruncatedError", "CheckpointVersionError",
    "ConfigError", "DataError", "DimensionError", "IldError", "NumericError",
]
