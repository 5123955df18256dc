"""Multi-scale separable spatiotemporal kernel synthesis at desk scale."""

from .errors import ConfigError, DimensionError, DivergenceError, KsynthError, UsageError
from .tensor import GradTape, Param, Tensor5, Tracked, backward

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "GradTape",
    "KsynthError",
    "Param",
    "Tensor5",
    "Tracked",
    "UsageError",
    "backward",
]
