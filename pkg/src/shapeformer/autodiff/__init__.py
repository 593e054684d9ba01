"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .io import checkpoint_digest, load_arrays, save_arrays
from .optim import RAdam
from .tensor import Tensor, backward, no_grad, topological_order

__all__ = ["Tensor", "backward", "no_grad", "topological_order", "ops", "RAdam",
           "save_arrays", "load_arrays", "checkpoint_digest"]
