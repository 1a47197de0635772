"""Dense tensors with reverse-mode automatic differentiation."""
from . import nn, ops
from .checkpoint import load_optimizer, load_weights, save_optimizer, save_weights
from .ops import forward_op
from .optim import EMA, Adam, adam_step
from .tensor import Parameter, Tape, Tensor, backward, shadow_f64

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "shadow_f64",
    "forward_op",
    "ops",
    "nn",
    "Adam",
    "adam_step",
    "EMA",
    "save_weights",
    "load_weights",
    "save_optimizer",
    "load_optimizer",
]
