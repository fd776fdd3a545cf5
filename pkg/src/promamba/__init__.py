"""Promptable polyp segmentation with a bidirectional selective-state-space encoder."""

from promamba.tensor import (
    ContractError,
    DimensionError,
    DomainError,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    grad_check,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
