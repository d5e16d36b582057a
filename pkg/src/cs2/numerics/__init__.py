"""Minimal differentiable tensor core used by every learning stage."""

from .functional import (
    DEFAULT_EPS,
    adain,
    channel_stats,
    conv2d,
    cross_entropy,
    gram,
    instance_norm,
    linear,
    log_softmax,
    mse,
    pad_edge,
    upsample_nearest,
)
from .gradcheck import grad_check
from .optim import OptimizerState, optimizer_step, zero_grads
from .tensor import Tensor, as_tensor, concat, is_grad_enabled, no_grad, parameter

__all__ = [
    "DEFAULT_EPS",
    "OptimizerState",
    "Tensor",
    "adain",
    "as_tensor",
    "channel_stats",
    "concat",
    "conv2d",
    "cross_entropy",
    "grad_check",
    "gram",
    "instance_norm",
    "is_grad_enabled",
    "linear",
    "log_softmax",
    "mse",
    "no_grad",
    "optimizer_step",
    "pad_edge",
    "parameter",
    "upsample_nearest",
    "zero_grads",
]
