"""Guided attention and Tucker bilinear attention for multi-scale detection."""
from . import autodiff, nn, tensor
from .errors import (
    ConfigError,
    ConstraintError,
    ContractError,
    FormatError,
    GenerationError,
    NumericError,
    ShapeError,
)
from .guided_attention import GAParams, ga_forward
from .tucker import TBAParams, TuckerCore, bilinear_fuse, bilinear_full, hosvd, tba_forward, tucker_reconstruct

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConstraintError",
    "ContractError",
    "FormatError",
    "GAParams",
    "GenerationError",
    "NumericError",
    "ShapeError",
    "TBAParams",
    "TuckerCore",
    "autodiff",
    "bilinear_full",
    "bilinear_fuse",
    "ga_forward",
    "hosvd",
    "nn",
    "tba_forward",
    "tensor",
    "tucker_reconstruct",
]
