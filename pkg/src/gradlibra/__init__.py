"""Grad-Libra loss: gradient-norm hardness re-weighting for long-tailed data."""

__version__ = "0.1.0"

from .losses import (  # noqa: E402
    LossConfig,
    LossKind,
    LossOutput,
    compute_loss,
    grad_libra_forward,
    hardness_weight,
    sigmoid,
)

__all__ = [
    "LossConfig",
    "LossKind",
    "LossOutput",
    "compute_loss",
    "grad_libra_forward",
    "hardness_weight",
    "sigmoid",
]
