"""Cost-volume filtering for unsupervised anomaly detection."""

from .errors import (
    DomainError,
    MissingStageError,
    NumericError,
    ShapeError,
    UCFError,
    UndefinedMetricError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "MissingStageError",
    "NumericError",
    "ShapeError",
    "UCFError",
    "UndefinedMetricError",
    "ValidationError",
    "__version__",
]
