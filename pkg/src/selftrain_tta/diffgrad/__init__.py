"""Minimal reverse-mode autodiff and Adam over numpy."""

from .engine import (
    PRIMITIVES,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    apply_primitive,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)
from .gradcheck import grad_check, grad_check_params
from .optim import AdamState, MissingGradError, adam_step

__all__ = [
    "PRIMITIVES",
    "AdamState",
    "MissingGradError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "apply_primitive",
    "backward",
    "default_dtype",
    "grad_check",
    "grad_check_params",
    "grad_enabled",
    "no_grad",
    "precision",
]
