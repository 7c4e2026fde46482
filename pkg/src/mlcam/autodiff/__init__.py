"""Minimal reverse-mode autodiff over numpy arrays."""
from mlcam.autodiff.ops import (
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    interpolation_matrix,
    linear,
    max_pool2d,
    relu,
    softmax,
    softmax_cross_entropy,
)
from mlcam.autodiff.tensor import Graph, Record, Tensor, as_tensor, backward, grad_enabled, no_grad, stack

__all__ = [
    "Graph",
    "Record",
    "Tensor",
    "as_tensor",
    "backward",
    "bilinear_upsample",
    "concat_channels",
    "conv2d",
    "global_avg_pool",
    "grad_enabled",
    "interpolation_matrix",
    "linear",
    "max_pool2d",
    "no_grad",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "stack",
]
