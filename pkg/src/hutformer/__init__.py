"""Hierarchical U-net Transformer for long-term traffic forecasting, on a numpy autograd core."""

from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .numerics import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
]
