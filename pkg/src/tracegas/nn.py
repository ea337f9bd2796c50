"""Small layer library on top of the numerics engine.

Layers register their tensors into a shared :class:`ParamStore` under a
dotted name prefix.  Initial values are drawn from an Rng child keyed by the
full parameter name, so initialisation is independent of construction order.
"""
from __future__ import annotations

import numpy as np

from .numerics import ParamStore, Rng, Tensor, conv2d, layer_norm, matmul
from .numerics import ops


class Layer:
    def __init__(self, store: ParamStore, prefix: str, rng: Rng, dtype):
        self.store = store
        self.prefix = prefix
        self.rng = rng
        self.dtype = dtype

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        return self.store.add(f"{self.prefix}.{name}", Tensor(array, dtype=self.dtype))

    def _init(self, name: str, shape, std: float) -> np.ndarray:
        if std == 0.0:
            return np.zeros(shape, dtype=self.dtype)
        return self.rng.child(f"init/{self.prefix}.{name}").normal(shape, std=std, dtype=self.dtype)


class Linear(Layer):
    """y = x @ W + b over the trailing feature dimension."""

    def __init__(self, store, prefix, rng, dtype, in_dim: int, out_dim: int,
                 bias: bool = True, std: float | None = None):
        super().__init__(store, prefix, rng, dtype)
        if std is None:
            std = float(1.0 / np.sqrt(in_dim))
        self.weight = self._param("weight", self._init("weight", (in_dim, out_dim), std))
        self.bias = self._param("bias", np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        # fold any leading dims into a single matmul batch
        lead = x.shape[:-1]
        flat = ops.reshape(x, (-1, x.shape[-1]))
        y = matmul(flat, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return ops.reshape(y, lead + (self.weight.shape[1],))


class Conv2d(Layer):
    def __init__(self, store, prefix, rng, dtype, cin: int, cout: int, k: int,
                 stride: int = 1, pad: int = 0, groups: int = 1, bias: bool = True,
                 std: float | None = None):
        super().__init__(store, prefix, rng, dtype)
        fan_in = (cin // groups) * k * k
        if std is None:
            std = float(np.sqrt(2.0 / fan_in))
        self.stride, self.pad, self.groups = stride, pad, groups
        self.weight = self._param("weight", self._init("weight", (cout, cin // groups, k, k), std))
        self.bias = self._param("bias", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      pad=self.pad, groups=self.groups)


class LayerNorm(Layer):
    def __init__(self, store, prefix, rng, dtype, dim: int, eps: float = 1e-6):
        super().__init__(store, prefix, rng, dtype)
        self.eps = eps
        self.gamma = self._param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self._param("beta", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """[B, h*w, C] -> [B, C, h, w]"""
    b, n, c = x.shape
    return ops.permute(ops.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


def grid_to_tokens(x: Tensor) -> Tensor:
    """[B, C, h, w] -> [B, h*w, C]"""
    b, c, h, w = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 3, 1)), (b, h * w, c))


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, h, w] -> [B, C]"""
    return ops.tmean(x, axis=(2, 3))
