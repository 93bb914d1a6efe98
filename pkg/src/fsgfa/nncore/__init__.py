"""Minimal reverse-mode differentiable numeric core on numpy arrays."""

from . import ops
from .gradcheck import check_gradients, check_many, numerical_grad, relative_error
from .tensor import DEFAULT_DTYPE, Parameter, Tape, Tensor, backward, no_tape

__all__ = [
    "DEFAULT_DTYPE",
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "no_tape",
    "numerical_grad",
    "ops",
    "relative_error",
]
