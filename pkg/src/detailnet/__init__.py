"""Monocular depth estimation with a dilated residual encoder and attention-fused decoder."""

__version__ = "0.1.0"

from . import kernels
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    DetailNetError,
    FormatError,
    ParseError,
    ShapeError,
    UsageError,
    VersionError,
)
from .network import DepthNet, NetworkConfig, build_network, predict
from .tensor import Tensor, backward, no_grad

__all__ = [
    "__version__",
    "kernels",
    "Tensor",
    "backward",
    "no_grad",
    "NetworkConfig",
    "DepthNet",
    "build_network",
    "predict",
    "DetailNetError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "UsageError",
    "FormatError",
    "VersionError",
    "CorruptionError",
    "ParseError",
]
