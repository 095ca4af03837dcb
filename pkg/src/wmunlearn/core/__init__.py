"""Minimal reverse-mode autodiff: tensors, graphs, layer primitives, optimizers."""

from .tensor import Graph, Tensor, evaluate, gradients, unbroadcast
from .functional import (
    BatchNormState,
    batch_norm_apply,
    conv2d,
    cross_entropy,
    kl_divergence,
    kl_to_target,
    log_softmax,
    max_pool2d,
)
from .optim import OptimizerState, optimizer_step

__all__ = [
    "Graph",
    "Tensor",
    "evaluate",
    "gradients",
    "unbroadcast",
    "BatchNormState",
    "batch_norm_apply",
    "conv2d",
    "cross_entropy",
    "kl_divergence",
    "kl_to_target",
    "log_softmax",
    "max_pool2d",
    "OptimizerState",
    "optimizer_step",
]
