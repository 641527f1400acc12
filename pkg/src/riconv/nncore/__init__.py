"""Small float64 autodiff core: tensors, layers, Adam and checkpoints."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .layers import MLP, Affine, BatchNorm, Conv1d, Module, Scale
from .optim import Adam, adam_step
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    affine,
    as_tensor,
    batch_norm,
    concat,
    conv1d,
    elementwise_scale,
    gather_rows,
    log_softmax,
    maxpool_set,
    relu,
    softmax_cross_entropy,
)

__all__ = [
    "Adam", "Affine", "BatchNorm", "Conv1d", "MLP", "Module", "Parameter", "Scale",
    "ShapeError", "Tensor", "adam_step", "affine", "as_tensor", "batch_norm", "concat",
    "conv1d", "elementwise_scale", "gather_rows", "load_checkpoint", "log_softmax",
    "maxpool_set", "read_checkpoint", "relu", "save_checkpoint", "softmax_cross_entropy",
]
