"""Minimal dense-tensor engine: forward kernels plus reverse-mode differentiation."""

from .tensor import Tensor, as_tensor, backward, is_grad_enabled, no_grad, zero_grads
from .ops import (
    add, sub, mul, div, neg, scale,
    sigmoid, relu, gelu, softplus,
    tsum, tmean, reshape, permute, swap_last2, concat, narrow,
    matmul, softmax_lastdim, logsumexp_lastdim, layer_norm,
    conv2d, bilinear_resize, constant,
)
from .rng import Rng, fnv1a64
from .optim import AdamW, ParamStore, adamw_step, cosine_lr
from .gradcheck import check_gradients, finite_diff_grad

__all__ = [
    "Tensor", "as_tensor", "backward", "is_grad_enabled", "no_grad", "zero_grads",
    "add", "sub", "mul", "div", "neg", "scale",
    "sigmoid", "relu", "gelu", "softplus",
    "tsum", "tmean", "reshape", "permute", "swap_last2", "concat", "narrow",
    "matmul", "softmax_lastdim", "logsumexp_lastdim", "layer_norm",
    "conv2d", "bilinear_resize", "constant",
    "Rng", "fnv1a64",
    "AdamW", "ParamStore", "adamw_step", "cosine_lr",
    "check_gradients", "finite_diff_grad",
]
