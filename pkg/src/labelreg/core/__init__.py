"""Minimal tensor engine: reverse-mode tape, layer ops, Adam."""

from .ops import (
    add,
    bilinear_matrix,
    concat_channels,
    conv2d,
    mse_loss,
    mul,
    pool2d,
    relu,
    scale,
    slice_channels,
    softmax_ce_loss,
    total,
    upsample,
    upsample_bilinear,
    upsample_nearest2x,
)
from .optim import AdamState, ParamStore, adam_step
from .tensor import Tape, Tensor, active_tape


def backward(tape: Tape, loss: Tensor):
    """Gradients of ``loss`` keyed by parameter name."""
    return tape.backward(loss)


__all__ = [
    "AdamState", "ParamStore", "Tape", "Tensor", "active_tape", "adam_step", "add", "backward",
    "bilinear_matrix", "concat_channels", "conv2d", "mse_loss", "mul", "pool2d", "relu", "scale",
    "slice_channels", "softmax_ce_loss", "total", "upsample", "upsample_bilinear", "upsample_nearest2x",
]
