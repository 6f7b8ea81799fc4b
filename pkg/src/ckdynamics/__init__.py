"""Dissipative quantum-classical transition dynamics in the Caldirola-Kanai model."""
from .core import (
    CKError,
    Config,
    Free,
    GaussianSpec,
    Grid,
    Harmonic,
    Linear,
    ModelParams,
    NumericalError,
    ValidationError,
    WaveField,
    scaled_planck,
    validate_params,
)

__all__ = [
    "CKError",
    "Config",
    "Free",
    "GaussianSpec",
    "Grid",
    "Harmonic",
    "Linear",
    "ModelParams",
    "NumericalError",
    "ValidationError",
    "WaveField",
    "scaled_planck",
    "validate_params",
]

__version__ = "0.1.0"
