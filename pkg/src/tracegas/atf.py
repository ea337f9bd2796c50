"""Temporal fusion over clips: three feature streams combined by single-head
cross-frame attention (or plain concatenation in the ablated variant) feeding
a two-layer flux classification head."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ShapeError
from .numerics import ParamStore, Rng, Tensor, ops
from .nn import Conv2d, Layer, LayerNorm, Linear, global_avg_pool

FLUX_CLASSES = ("HF", "CTRL", "LF")  # class order: High-Flux, Control, Low-Flux


class StreamC(Layer):
    """Lightweight CNN over the clip's mean frame -> 256-d residual stream."""

    def __init__(self, store, prefix, rng, dtype, dim: int):
        super().__init__(store, prefix, rng, dtype)
        self.conv1 = Conv2d(store, f"{prefix}.conv1", rng, dtype, 3, 16, 3, stride=2, pad=1)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", rng, dtype, 16, 32, 3, stride=2, pad=1)
        self.proj = Linear(store, f"{prefix}.proj", rng, dtype, 32, dim)

    def __call__(self, mean_frame: Tensor) -> Tensor:
        y = ops.gelu(self.conv1(mean_frame))
        y = ops.gelu(self.conv2(y))
        return self.proj(global_avg_pool(y))


class TemporalFusion(Layer):
    """Clip embedding from streams (a, b, c).

    a: [B, dim]  pooled mask-prior features (one query per clip)
    b: [B, T, dim]  per-frame descriptors (keys/values)
    c: [B, dim]  CNN stream (residual correction)
    """

    def __init__(self, store, prefix, rng, dtype, dim: int = 256,
                 prior_channels: int = 16, concat_fusion: bool = False):
        super().__init__(store, prefix, rng, dtype)
        self.dim = dim
        self.concat_fusion = concat_fusion
        self.proj_a = Linear(store, f"{prefix}.proj_a", rng, dtype, prior_channels, dim)
        self.proj_b = Linear(store, f"{prefix}.proj_b", rng, dtype, dim, dim)
        self.cnn = StreamC(store, f"{prefix}.cnn", rng, dtype, dim)
        if concat_fusion:
            self.concat = Linear(store, f"{prefix}.concat", rng, dtype, 3 * dim, dim)
        else:
            self.wq = Linear(store, f"{prefix}.wq", rng, dtype, dim, dim, bias=False)
            self.wk = Linear(store, f"{prefix}.wk", rng, dtype, dim, dim, bias=False)
            self.wv = Linear(store, f"{prefix}.wv", rng, dtype, dim, dim, bias=False)
            self.wr = Linear(store, f"{prefix}.wr", rng, dtype, dim, dim, bias=False)
            self.temporal_scale = self._param("temporal_scale", np.ones(1, dtype=dtype))
            self.residual_scale = self._param("residual_scale",
                                              np.full(1, 0.1, dtype=dtype))
            self.norm = LayerNorm(store, f"{prefix}.norm", rng, dtype, dim)

    def stream_a(self, prior_feats_seq: Tensor) -> Tensor:
        """[B, T, 16, H, W] mask-prior features -> [B, dim] query stream."""
        pooled = ops.tmean(prior_feats_seq, axis=(3, 4))   # GAP per frame: [B,T,16]
        return self.proj_a(ops.tmean(pooled, axis=1))      # temporal mean -> project

    def stream_b(self, f4_seq: Tensor) -> Tensor:
        """[B, T, C, h4, w4] final-stage maps -> [B, T, dim] frame descriptors."""
        pooled = ops.tmean(f4_seq, axis=(3, 4))            # GAP: [B,T,C]
        return self.proj_b(pooled)

    def stream_c(self, mean_frame: Tensor) -> Tensor:
        return self.cnn(mean_frame)

    def fuse(self, a: Tensor, b: Tensor, c: Tensor,
             capture: Optional[dict] = None) -> Tensor:
        batch, t = b.shape[0], b.shape[1]
        if t == 0:
            raise ShapeError("temporal fusion needs at least one frame")
        if self.concat_fusion:
            return self.concat(ops.concat([a, ops.tmean(b, axis=1), c], axis=1))
        q = ops.reshape(self.wq(a), (batch, 1, self.dim))
        k = ops.mul(self.temporal_scale, self.wk(b))
        v = ops.mul(self.temporal_scale, self.wv(b))
        scores = ops.scale(ops.matmul(q, ops.swap_last2(k)), 1.0 / math.sqrt(self.dim))
        attn = ops.softmax_lastdim(scores)                 # [B,1,T]
        if capture is not None:
            capture["frame_weights"] = attn.data.copy()
        z = ops.reshape(ops.matmul(attn, v), (batch, self.dim))
        resid = ops.mul(self.residual_scale, self.wr(c))
        return self.norm(ops.add(z, resid))


class Classifier(Layer):
    """Two-layer flux head: Linear dim->hidden -> gelu -> Linear hidden->3."""

    def __init__(self, store, prefix, rng, dtype, dim: int = 256, hidden: int = 128,
                 classes: int = 3):
        super().__init__(store, prefix, rng, dtype)
        self.fc1 = Linear(store, f"{prefix}.fc1", rng, dtype, dim, hidden)
        self.fc2 = Linear(store, f"{prefix}.fc2", rng, dtype, hidden, classes)

    def __call__(self, embedding: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(embedding)))


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """argmax with ties broken toward the lowest class index."""
    return np.argmax(logits, axis=-1)
