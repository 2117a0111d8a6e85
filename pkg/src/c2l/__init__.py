"""Self-supervised contrastive pretraining with a momentum teacher,
a memory queue, and batch/feature mixup, plus a linear-probe and
fine-tune evaluation harness.  Everything runs on numpy (with optional
compiled kernels); there is no framework dependency.
"""

from .numerics import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    set_finite_checks,
    sgd_step,
)
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "RngStream",
    "backward",
    "set_finite_checks",
    "sgd_step",
    "__version__",
]
