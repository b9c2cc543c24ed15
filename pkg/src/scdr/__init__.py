"""Two-branch limited-data recognition: activation-map capture, hardest-pair
discrimination and learnable vote fusion, on a from-scratch autodiff engine."""
from .errors import (AugmentationError, BatchError, CheckpointError, ConfigError, DataError,
                     DegenerateVectorError, DimensionError, GraphStateError, NumericError, ScdrError)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AugmentationError", "BatchError", "CheckpointError", "ConfigError", "DataError", "DegenerateVectorError",
    "DimensionError", "GraphStateError", "NumericError", "ScdrError", "Tensor",
]
