"""Deterministic float64 reverse-mode differentiation on numpy arrays."""

from .gradcheck import analytic_grads, grad_check, numerical_grad
from .ops import (
    add,
    as_tensor,
    avg_pool2d,
    avg_pool_full,
    bce_with_logits,
    concat,
    concat_channels,
    conv2d,
    div,
    exp,
    linear,
    log,
    log_sigmoid,
    log_softmax_rows,
    masked_select,
    matmul,
    mean,
    mul,
    patchify,
    permute,
    relu,
    reshape,
    scaled_dot_attention,
    sigmoid,
    softmax_rows,
    sqrt,
    square,
    sub,
    sum,
    take,
    transpose_last,
    upsample_nearest,
)
from .tensor import Grid4, ShapeError, Tape, TapeError, Tensor, active_tape, backward

__all__ = [name for name in dir() if not name.startswith("_")]
