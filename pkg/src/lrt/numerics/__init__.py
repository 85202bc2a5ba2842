"""Tensor arithmetic with reverse-mode gradients."""

from ._kernels import BACKEND
from .tensor import (
    Tape,
    Tensor,
    add,
    arccos,
    as_tensor,
    backward,
    clip,
    concat,
    cos,
    cosine_matrix,
    cosine_similarity,
    div,
    exp,
    l2_normalize,
    log,
    matmul,
    mean,
    mul,
    neg,
    parameter,
    patch_encode,
    pick,
    relu,
    reshape,
    softmax,
    stack,
    sub,
    sum_,
    take,
    transpose,
)

__all__ = [
    "BACKEND", "Tape", "Tensor", "add", "arccos", "as_tensor", "backward", "clip",
    "concat", "cos", "cosine_matrix", "cosine_similarity", "div", "exp", "l2_normalize",
    "log", "matmul", "mean", "mul", "neg", "parameter", "patch_encode", "pick", "relu",
    "reshape", "softmax", "stack", "sub", "sum_", "take", "transpose",
]
