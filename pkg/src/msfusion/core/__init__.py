from .ops import (
    BatchNormState,
    ConvParams,
    add,
    batchnorm3d,
    concat,
    conv3d,
    conv_output_shape,
    global_avg_pool,
    linear,
    mul,
    pointwise,
    relu,
    scale_shift,
    sigmoid,
    softmax,
    tanh,
    weighted_cross_entropy,
)
from .optim import Adam, adam_step, lr_at_epoch
from .tensor import Tensor, no_grad, precision, set_finite_checks

__all__ = [
    "Adam",
    "BatchNormState",
    "ConvParams",
    "Tensor",
    "adam_step",
    "add",
    "batchnorm3d",
    "concat",
    "conv3d",
    "conv_output_shape",
    "global_avg_pool",
    "linear",
    "lr_at_epoch",
    "mul",
    "no_grad",
    "pointwise",
    "precision",
    "relu",
    "scale_shift",
    "set_finite_checks",
    "sigmoid",
    "softmax",
    "tanh",
    "weighted_cross_entropy",
]
