"""Minimal deterministic differentiable-operator kernel on float32 numpy.

Reverse-mode autodiff over a small op set (conv, resample, pointwise,
reductions, the two training losses), an Adam optimizer, finite-difference
gradient checking, structural-reparameterization conv blocks, and a binary
checkpoint format. Single-threaded execution keeps results bit-reproducible
for a fixed seed.
"""

from .tensor import (
    NnkitError,
    add,
    div,
    getitem,
    reshape,
    NonFiniteError,
    ShapeError,
    Tensor,
    Param,
    arctan,
    avg_pool2,
    bce_with_logits,
    clamp,
    concat,
    conv2d,
    conv2d_data,
    exp,
    leaky_relu,
    leaky_relu_data,
    linear,
    log as tlog,
    maximum,
    mean,
    minimum,
    mse,
    mul,
    resize_nearest2d,
    sigmoid,
    sqrt,
    square,
    sub,
    tsum,
    tanh,
    upsample_nearest2,
)
from .layers import Conv2d, Linear, RepConvBlock, repconv_fuse
from .optim import Adam
from .gradcheck import grad_check, gradcheck_report
from .checkpoint import load_params, save_params

__all__ = [
    "NnkitError", "add", "div", "getitem", "reshape", "NonFiniteError", "ShapeError", "Tensor", "Param",
    "arctan", "avg_pool2", "bce_with_logits", "clamp", "concat", "conv2d",
    "exp", "conv2d_data", "leaky_relu", "leaky_relu_data", "linear", "tlog", "maximum", "mean", "minimum",
    "mse", "mul", "resize_nearest2d", "sigmoid", "sqrt", "square", "sub",
    "tsum", "tanh", "upsample_nearest2",
    "Conv2d", "Linear", "RepConvBlock", "repconv_fuse",
    "Adam", "grad_check", "gradcheck_report", "load_params", "save_params",
]
