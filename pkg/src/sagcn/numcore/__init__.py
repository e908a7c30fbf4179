"""Numerical core: tensors, gradient tape, layers, optimizer, RNG."""

from . import tensor as ops
from .nn import Params, frozen, gru_cell, gru_sequence, init_gru, init_linear, linear, uniform_init
from .optim import AdamState, adam_step
from .random import make_rng, split
from .tensor import Tape, Tensor, as_tensor

__all__ = [
    "AdamState",
    "Params",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "frozen",
    "gru_cell",
    "gru_sequence",
    "init_gru",
    "init_linear",
    "linear",
    "make_rng",
    "ops",
    "split",
    "uniform_init",
]
