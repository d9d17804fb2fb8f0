"""Conditional Brownian-bridge diffusion for CT-to-PET style image translation."""

from cpdm.errors import (
    ConfigError,
    FormatError,
    RangeError,
    ShapeError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "RangeError",
    "ShapeError",
    "TrainingError",
]
