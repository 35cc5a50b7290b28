"""Multi-view hashing: gated confidence-weighted encoders producing k-bit
binary codes, plus Hamming retrieval and mAP evaluation."""

from . import data, loss, model, nd, retrieval, train
from .errors import (
    ConfigError,
    DegenerateRowError,
    FormatError,
    MvhashError,
    NumericalAbort,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "data", "loss", "model", "nd", "retrieval", "train",
    "MvhashError", "ShapeError", "ValidationError", "ConfigError",
    "FormatError", "DegenerateRowError", "NumericalAbort", "__version__",
]
