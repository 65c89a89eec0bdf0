from . import functional
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .functional import (
    binary_cross_entropy,
    conv1d,
    kl_divergence,
    layer_norm,
    linear,
    lstm,
    maxpool1d,
    mse,
    softmax,
    symmetric_kl,
)
from .gradcheck import grad_check, numeric_grad
from .module import Module, count_params
from .optim import Adam
from .tensor import Tensor, no_grad, stop_gradient

__all__ = [
    "Adam",
    "Checkpoint",
    "Module",
    "Tensor",
    "binary_cross_entropy",
    "conv1d",
    "count_params",
    "functional",
    "grad_check",
    "kl_divergence",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "lstm",
    "maxpool1d",
    "mse",
    "no_grad",
    "numeric_grad",
    "save_checkpoint",
    "softmax",
    "stop_gradient",
    "symmetric_kl",
]
