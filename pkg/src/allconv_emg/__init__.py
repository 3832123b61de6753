"""Lightweight All-ConvNet gesture recognition on instantaneous HD-sEMG images."""

from allconv_emg.errors import (
    AllConvError,
    ArchitectureMismatch,
    ConfigurationError,
    ContractViolation,
    FormatError,
    NumericalError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "AllConvError",
    "ArchitectureMismatch",
    "ConfigurationError",
    "ContractViolation",
    "FormatError",
    "NumericalError",
    "UsageError",
]
