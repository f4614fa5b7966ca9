"""Minimal float64 tensor library with reverse-mode differentiation."""

from scripts.autograd.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    bilinear_resize,
    concat,
    conv2d,
    detach,
    elementwise,
    flip,
    getitem,
    interp_indices,
    l2_normalize,
    log_softmax,
    matmul,
    no_grad,
    ones,
    ones_like,
    power,
    reduce,
    reshape,
    softmax,
    transpose,
    zeros,
)
from scripts.autograd.optim import AdamW
from scripts.autograd.gradcheck import GradCheckResult, gradcheck, numerical_gradient
