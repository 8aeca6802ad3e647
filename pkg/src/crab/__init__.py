"""Bimodal emotion classification with multi-layer contrastive supervision,
built on a self-contained reverse-mode autodiff core."""

from . import checkpoint, config, data, layers, losses, metrics, model, optim, tensor, train
from .errors import (
    ConfigError,
    ContractError,
    CrabError,
    DataError,
    DegenerateInputError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
)
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "checkpoint",
    "config",
    "data",
    "layers",
    "losses",
    "metrics",
    "model",
    "optim",
    "tensor",
    "train",
    "CrabError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateInputError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "__version__",
]
