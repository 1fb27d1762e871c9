"""Tensor engine: float32 arrays, taped reverse-mode autodiff, conv ops,
and the finite-difference oracle used to validate every primitive."""

from .tensor import (
    GradTape,
    Tensor,
    add,
    assert_finite,
    broadcast_to,
    clamp,
    concat,
    div,
    exp,
    gather0,
    getitem,
    layer_norm,
    log,
    log1p,
    make_rng,
    matmul,
    mul,
    neg,
    no_tape_active,
    pow_scalar,
    reshape,
    scatter_rows,
    segment_cumsum_excl,
    segment_sum,
    sigmoid,
    silu,
    softmax,
    sqrt,
    stack,
    sub,
    suspend_tape,
    tmean,
    transpose,
    tsum,
)
from .conv import conv2d, conv3d, conv_transpose2d, conv_transpose3d
from .gradcheck import finite_diff_grad, max_rel_error

__all__ = [
    "GradTape", "Tensor", "add", "assert_finite", "broadcast_to", "clamp",
    "concat", "conv2d", "conv3d", "conv_transpose2d", "conv_transpose3d",
    "div", "exp", "finite_diff_grad", "gather0", "getitem", "layer_norm",
    "log", "log1p", "make_rng", "matmul", "max_rel_error", "mul", "neg",
    "no_tape_active", "pow_scalar", "reshape", "scatter_rows",
    "segment_cumsum_excl", "segment_sum", "sigmoid", "silu", "softmax",
    "sqrt", "stack", "sub", "suspend_tape", "tmean", "transpose", "tsum",
]
