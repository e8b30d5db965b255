"""Small reverse-mode autodiff engine over numpy arrays."""

from .core import Tensor, as_tensor, backward
from .gradcheck import grad_check, numeric_grad, run_op_suite
from .ops import (
    ShapeError,
    add,
    avg_pool2d,
    bce_loss,
    clip_min,
    concat_channels,
    conv2d,
    conv_transpose2d,
    flatten,
    linear,
    max_pool2d,
    mean,
    minmax_normalize,
    mse_loss,
    mul,
    relu,
    reshape,
    select,
    sigmoid,
    softmax,
    split_channels,
    square,
    sub,
    sub_scalar,
    sum,
    tanh,
    tile_spatial,
)

__all__ = [
    "Tensor", "as_tensor", "backward", "grad_check", "numeric_grad", "run_op_suite", "ShapeError",
    "add", "avg_pool2d", "bce_loss", "clip_min", "concat_channels", "conv2d", "conv_transpose2d",
    "flatten", "linear", "max_pool2d", "mean", "minmax_normalize", "mse_loss", "mul", "relu",
    "reshape", "select", "sigmoid", "softmax", "split_channels", "square", "sub", "sub_scalar",
    "sum", "tanh", "tile_spatial",
]
