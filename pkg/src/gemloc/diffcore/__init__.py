"""Minimal reverse-mode autodiff engine, Adam optimizer, and checkpoint IO."""

from gemloc.diffcore.tensor import (
    DiffcoreError,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    conv3d,
    cumsum,
    dense,
    div,
    exp,
    matmul,
    mse,
    mul,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    sub,
    transpose,
    trilinear_sample,
    upsample3d_nearest,
)
from gemloc.diffcore.optim import Adam, NonFiniteGradError
from gemloc.diffcore.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "DiffcoreError",
    "GraphError",
    "NonFiniteError",
    "NonFiniteGradError",
    "ShapeError",
    "Tensor",
    "add",
    "concat",
    "conv3d",
    "cumsum",
    "dense",
    "div",
    "exp",
    "load_checkpoint",
    "matmul",
    "mse",
    "mul",
    "no_grad",
    "power",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "silu",
    "softmax",
    "softplus",
    "sub",
    "transpose",
    "trilinear_sample",
    "upsample3d_nearest",
]
