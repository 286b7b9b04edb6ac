from .core import (
    BackwardError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)
from .gradcheck import GradcheckError, check_directions, check_parameters, gradient_check
from .optim import Adam, AdamState, adam_step
from .serialize import read_tensor, tensor_bytes, write_tensor
from . import ops

__all__ = [
    "Adam",
    "AdamState",
    "BackwardError",
    "GradcheckError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "check_directions",
    "check_parameters",
    "default_dtype",
    "gradient_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "read_tensor",
    "set_default_dtype",
    "tensor_bytes",
    "write_tensor",
]
