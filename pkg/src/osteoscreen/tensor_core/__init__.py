"""Minimal reverse-mode autodiff engine used by the network."""

from . import checkpoint, ops
from .gradcheck import GradCheckReport, ParamCheck, grad_check
from .optim import SgdState, sgd_step
from .rng import make_rng
from .tensor import BACKWARD_RULES, FLOAT32, FLOAT64, Node, Tape, Tensor, default_dtype, precision

__all__ = [
    "BACKWARD_RULES", "FLOAT32", "FLOAT64", "GradCheckReport", "Node", "ParamCheck", "SgdState",
    "Tape", "Tensor", "checkpoint", "default_dtype", "grad_check", "make_rng", "ops", "precision",
    "sgd_step",
]
