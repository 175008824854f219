"""Minimal tensor engine with reverse-mode differentiation."""

from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (
    ShapeError,
    add,
    concat,
    conv2d,
    conv_output_size,
    dense,
    log_softmax,
    mul,
    pool2d,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    spatial_mean,
    total,
    shift,
    weighted_sum,
)
from .optim import sgd_step
from .tensor import Parameter, Tape, Tensor, active_tape, as_tensor, record

__all__ = [
    "GradCheckReport",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "concat",
    "conv2d",
    "conv_output_size",
    "dense",
    "grad_check",
    "log_softmax",
    "mul",
    "pool2d",
    "record",
    "relative_error",
    "relu",
    "reshape",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
    "spatial_mean",
    "total",
    "shift",
    "weighted_sum",
]
