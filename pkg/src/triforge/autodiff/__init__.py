from .tensor import (
    Tensor,
    Tape,
    AutodiffError,
    NonFiniteError,
    TapeError,
    active_tape,
)
from . import ops
from .optim import Adam, adam_step, adam_state
from .io import save_tensor, load_tensor, save_bundle, load_bundle, ContainerError

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "NonFiniteError",
    "TapeError",
    "active_tape",
    "ops",
    "Adam",
    "adam_step",
    "adam_state",
    "save_tensor",
    "load_tensor",
    "save_bundle",
    "load_bundle",
    "ContainerError",
]
