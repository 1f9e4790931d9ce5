from kanrecon.ndtensor.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from kanrecon.ndtensor.optim import Adam, AdamState, adam_step
from kanrecon.ndtensor.tensor import (
    PRIMITIVES,
    GradTape,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    primitive_forward,
    set_default_dtype,
)

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "GradTape",
    "NonFiniteError",
    "PRIMITIVES",
    "ShapeError",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "default_dtype",
    "load_checkpoint",
    "no_grad",
    "primitive_forward",
    "save_checkpoint",
    "set_default_dtype",
]
