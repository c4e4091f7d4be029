from .kernels import BACKEND
from .ops import (
    add,
    add_bias,
    bce_with_logits,
    concat,
    conv1d,
    conv_out_len,
    embedding,
    gather_logits,
    linear,
    matmul,
    mul,
    mul_const,
    narrow,
    pad_to,
    relu,
    reshape,
    scale,
    softmax_rows,
    spectral_scale,
    total,
    transpose,
)
from .tensor import Tensor, backward, detach, grad_enabled, no_grad

__all__ = [
    "BACKEND",
    "Tensor",
    "add",
    "add_bias",
    "backward",
    "bce_with_logits",
    "concat",
    "conv1d",
    "conv_out_len",
    "detach",
    "embedding",
    "gather_logits",
    "grad_enabled",
    "linear",
    "matmul",
    "mul",
    "mul_const",
    "narrow",
    "pad_to",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "softmax_rows",
    "spectral_scale",
    "total",
    "transpose",
]
