"""Minimal reverse-mode autodiff over numpy arrays."""
from .core import (
    NonFiniteError,
    Parameter,
    Tensor,
    as_tensor,
    config,
    default_dtype,
    get_default_dtype,
    is_deterministic,
    no_grad,
    set_default_dtype,
    set_deterministic,
)
from . import ops
from .ops import (
    activation,
    avg_pool2d,
    batch_norm2d,
    bilinear_sample,
    concat,
    conv2d,
    elementwise_reduce,
    linear,
    max_pool2d,
    minimum,
    pad2d,
    relu,
    sigmoid,
    softmax,
    stack,
    upsample_bilinear,
    where,
)
from .kernels import BACKEND
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "BACKEND", "GradCheckReport", "NonFiniteError", "Parameter", "Tensor",
    "activation", "as_tensor", "avg_pool2d", "batch_norm2d", "bilinear_sample",
    "concat", "config", "conv2d", "default_dtype", "elementwise_reduce",
    "get_default_dtype", "grad_check", "is_deterministic", "linear",
    "max_pool2d", "minimum", "no_grad", "ops", "pad2d", "relu",
    "set_default_dtype", "set_deterministic", "sigmoid", "softmax", "stack",
    "upsample_bilinear", "where",
]
