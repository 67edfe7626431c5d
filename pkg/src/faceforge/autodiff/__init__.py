"""Minimal reverse-mode autodiff over dense float tensors."""

from . import ops
from .gradcheck import grad_check
from .kernels import BACKEND as KERNEL_BACKEND
from .ops import BatchNormState
from .tensor import AutodiffError, Tape, Tensor

__all__ = [
    "AutodiffError",
    "BatchNormState",
    "KERNEL_BACKEND",
    "Tape",
    "Tensor",
    "grad_check",
    "ops",
]
