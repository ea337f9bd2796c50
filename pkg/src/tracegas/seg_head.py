"""All-MLP decode head: fuse the four stage maps with a mask-prior channel
into a single-channel plume logit map at input resolution.

The logit map is ``conv1x1([upsample(fused) ; prior_feats])``.  Because the
output convolution and the upsample are both linear, the head projects each
branch to one channel first and upsamples that instead -- the same function,
but the full-resolution tensors stay single-channel.  When the 16-channel
prior features are not needed elsewhere, the prior branch additionally folds
its (linear) second convolution into the output projection.
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, ops
from .nn import Conv2d, Layer


class MaskPriorEncoder(Layer):
    """Two 3x3 convolutions lifting the previous frame's mask to 16 channels."""

    def __init__(self, store, prefix, rng, dtype, channels: int = 16):
        super().__init__(store, prefix, rng, dtype)
        self.channels = channels
        self.conv1 = Conv2d(store, f"{prefix}.conv1", rng, dtype, 1, channels // 2, 3, pad=1)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", rng, dtype, channels // 2, channels, 3, pad=1)

    def __call__(self, prev_mask: Tensor) -> Tensor:
        return self.conv2(ops.gelu(self.conv1(prev_mask)))


class SegHead(Layer):
    def __init__(self, store, prefix, rng, dtype, stage_channels, embed_dim: int = 128,
                 prior_channels: int = 16):
        super().__init__(store, prefix, rng, dtype)
        self.embed_dim = embed_dim
        self.prior_channels = prior_channels
        self.proj = [
            Conv2d(store, f"{prefix}.proj{i + 1}", rng, dtype, c, embed_dim, 1)
            for i, c in enumerate(stage_channels)
        ]
        self.fuse = Conv2d(store, f"{prefix}.fuse", rng, dtype,
                           embed_dim * len(stage_channels), embed_dim, 1)
        self.prior = MaskPriorEncoder(store, f"{prefix}.prior", rng, dtype, prior_channels)
        self.out = Conv2d(store, f"{prefix}.out", rng, dtype,
                          embed_dim + prior_channels, 1, 1)

    def _split_out_weight(self):
        w = ops.reshape(self.out.weight, (1, self.embed_dim + self.prior_channels))
        w_fused = ops.reshape(ops.narrow(w, 1, 0, self.embed_dim),
                              (1, self.embed_dim, 1, 1))
        w_prior = ops.narrow(w, 1, self.embed_dim, self.prior_channels)
        return w_fused, w_prior

    def __call__(self, stages: List[Tensor], prev_mask: Tensor,
                 prior_feats: Optional[Tensor] = None) -> Tensor:
        batches = {f.shape[0] for f in stages} | {prev_mask.shape[0]}
        if len(batches) != 1:
            raise ShapeError(f"segment: mismatched batch sizes {sorted(batches)}")
        qh, qw = stages[0].shape[2], stages[0].shape[3]
        full_h, full_w = prev_mask.shape[2], prev_mask.shape[3]
        feats = [ops.bilinear_resize(p(f), qh, qw) for p, f in zip(self.proj, stages)]
        # fuse(concat(feats)) as a sum of per-stage slices of the fuse kernel
        fw = ops.reshape(self.fuse.weight, (self.embed_dim, len(feats) * self.embed_dim))
        fused = None
        for i, f in enumerate(feats):
            w_i = ops.reshape(ops.narrow(fw, 1, i * self.embed_dim, self.embed_dim),
                              (self.embed_dim, self.embed_dim, 1, 1))
            part = ops.conv2d(f, w_i, self.fuse.bias if i == 0 else None)
            fused = part if fused is None else ops.add(fused, part)

        w_fused, w_prior = self._split_out_weight()
        from_fused = ops.bilinear_resize(ops.conv2d(fused, w_fused), full_h, full_w)
        if prior_feats is not None:
            w_prior_conv = ops.reshape(w_prior, (1, self.prior_channels, 1, 1))
            from_prior = ops.conv2d(prior_feats, w_prior_conv, self.out.bias)
        else:
            # Fold conv2 of the prior encoder (linear) into the 1-channel output
            # projection: w_comp = w_prior . conv2.weight, b_comp = w_prior . conv2.bias.
            c2 = self.prior.conv2
            half = self.prior_channels // 2
            w2 = ops.reshape(c2.weight, (self.prior_channels, half * 9))
            w_comp = ops.reshape(ops.matmul(w_prior, w2), (1, half, 3, 3))
            b_comp = ops.matmul(w_prior, ops.reshape(c2.bias, (self.prior_channels, 1)))
            bias = ops.add(ops.reshape(b_comp, (1,)), self.out.bias)
            hidden = ops.gelu(self.prior.conv1(prev_mask))
            from_prior = ops.conv2d(hidden, w_comp, bias, pad=1)
        return ops.add(from_fused, from_prior)


def binarize(logits: Tensor, threshold: float = 0.5) -> np.ndarray:
    """Hard {0,1} mask from logits: sigmoid(logits) > threshold."""
    probs = 1.0 / (1.0 + np.exp(-np.clip(logits.data, -60.0, 60.0)))
    return (probs > threshold).astype(logits.dtype)
