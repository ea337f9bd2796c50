"""Four-stage hierarchical attention encoder conditioned on a gas-intensity map.

Every attention block modulates its scores and values with a per-pixel gas
gate and passes the aggregated output through a spatial dispersion gate
before the residual/LayerNorm/Mix-FFN tail.  With gating bypassed the block
degenerates to plain spatial-reduction attention and its output no longer
depends on the gas channel at all.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import GeometryError, ShapeError
from .numerics import ParamStore, Rng, Tensor, ops
from .nn import Conv2d, Layer, LayerNorm, Linear, grid_to_tokens, tokens_to_grid


@dataclass
class EncoderConfig:
    channels: Tuple[int, ...] = (32, 64, 160, 256)
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    patch_kernels: Tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: Tuple[int, ...] = (4, 2, 2, 2)
    reduction: Tuple[int, ...] = (8, 4, 2, 1)
    heads: Tuple[int, ...] = (1, 2, 5, 8)
    ffn_expansion: int = 4
    gas_hidden: int = 8

    def validate(self) -> None:
        lists = [self.channels, self.depths, self.patch_kernels,
                 self.patch_strides, self.reduction, self.heads]
        if len({len(x) for x in lists}) != 1:
            raise ShapeError("encoder config: per-stage lists must share one length")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ShapeError(f"encoder config: channels {c} not divisible by heads {h}")


def stage_grids(cfg: EncoderConfig, height: int, width: int) -> List[Tuple[int, int]]:
    """Spatial grid of each stage for a given input resolution."""
    grids = []
    h, w = height, width
    for k, s in zip(cfg.patch_kernels, cfg.patch_strides):
        pad = k // 2
        h = (h + 2 * pad - k) // s + 1
        w = (w + 2 * pad - k) // s + 1
        if h < 1 or w < 1:
            raise GeometryError(f"input {height}x{width} too small for the stage pyramid")
        grids.append((h, w))
    return grids


def effective_reduction(r: int, h: int, w: int) -> int:
    """Largest ratio <= r that tiles the h x w token grid exactly."""
    for cand in range(min(r, h, w), 0, -1):
        if h % cand == 0 and w % cand == 0:
            return cand
    return 1


def pool_gas(gas: Tensor, h: int, w: int, warn: Optional[Dict[str, int]] = None) -> Tensor:
    """Resize the [B,1,H,W] gas map to (h, w), clamping stray values to [0,1]."""
    data = gas.data
    if data.min() < 0.0 or data.max() > 1.0:
        if warn is not None:
            warn["clamped"] = warn.get("clamped", 0) + 1
        gas = ops.constant(np.clip(data, 0.0, 1.0), dtype=data.dtype)
    return ops.bilinear_resize(gas, h, w)


class GasGate(Layer):
    """Per-stage gas conditioning: a key gate MLP and the dispersion gate.

    The key gate is a per-pixel 1->hidden->1 MLP whose final layer starts at
    zero, so an untrained gate sits exactly at sigmoid(0) = 0.5.  The
    dispersion gate is a 1x1 convolution from the gas map to per-channel
    sigmoid weights.
    """

    def __init__(self, store, prefix, rng, dtype, channels: int, hidden: int):
        super().__init__(store, prefix, rng, dtype)
        self.mlp1 = Linear(store, f"{prefix}.mlp1", rng, dtype, 1, hidden)
        self.mlp2 = Linear(store, f"{prefix}.mlp2", rng, dtype, hidden, 1, std=0.0)
        self.gate_conv = Conv2d(store, f"{prefix}.gate", rng, dtype, 1, channels, 1,
                                std=float(1.0 / math.sqrt(channels)))

    def key_gate(self, gas_tokens: Tensor) -> Tensor:
        """[B, N_r, 1] gas values -> (0,1) gate per key position."""
        return ops.sigmoid(self.mlp2(ops.gelu(self.mlp1(gas_tokens))))

    def dispersion(self, y_map: Tensor, gas_map: Tensor) -> Tensor:
        """sigmoid(conv1x1(gas)) * y, broadcasting the gate over channels."""
        gate = ops.sigmoid(self.gate_conv(gas_map))
        return ops.mul(gate, y_map)


class GasAttention(Layer):
    """Spatial-reduction attention with key-side gas gating and value boost."""

    def __init__(self, store, prefix, rng, dtype, channels: int, heads: int, reduction: int):
        super().__init__(store, prefix, rng, dtype)
        self.channels = channels
        self.heads = heads
        self.reduction = reduction
        self.head_dim = channels // heads
        self.q = Linear(store, f"{prefix}.q", rng, dtype, channels, channels)
        self.k = Linear(store, f"{prefix}.k", rng, dtype, channels, channels)
        self.v = Linear(store, f"{prefix}.v", rng, dtype, channels, channels)
        self.proj = Linear(store, f"{prefix}.proj", rng, dtype, channels, channels)
        if reduction > 1:
            self.sr = Conv2d(store, f"{prefix}.sr", rng, dtype, channels, channels,
                             reduction, stride=reduction)
            self.sr_norm = LayerNorm(store, f"{prefix}.sr_norm", rng, dtype, channels)
        else:
            self.sr = None
            self.sr_norm = None

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return ops.permute(ops.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, gas_map: Tensor, gate: GasGate, h: int, w: int,
                 bypass: bool = False, capture: Optional[dict] = None) -> Tensor:
        b, n, c = x.shape
        if n != h * w:
            raise ShapeError(f"attention: {n} tokens cannot form a {h}x{w} grid")
        r = self.reduction
        if h % r or w % r:
            raise GeometryError(f"attention: reduction {r} does not divide grid {h}x{w}")
        if self.sr is not None:
            red = grid_to_tokens(self.sr(tokens_to_grid(x, h, w)))
            red = self.sr_norm(red)
            hr, wr = h // r, w // r
        else:
            red, hr, wr = x, h, w

        q = self._split_heads(self.q(x))                   # [B,heads,N,d]
        k = self._split_heads(self.k(red))                 # [B,heads,Nr,d]
        v = self._split_heads(self.v(red))
        scores = ops.scale(ops.matmul(q, ops.swap_last2(k)),
                           1.0 / math.sqrt(self.head_dim))  # [B,heads,N,Nr]
        if capture is not None:
            capture["scores_raw"] = scores.data.copy()

        if not bypass:
            gas_keys = grid_to_tokens(pool_gas(gas_map, hr, wr))   # [B,Nr,1]
            kg = gate.key_gate(gas_keys)                           # [B,Nr,1]
            if capture is not None:
                capture["key_gate"] = kg.data.copy()
            scores = ops.mul(scores, ops.reshape(kg, (b, 1, 1, hr * wr)))
            v = ops.mul(v, ops.reshape(ops.add(1.0, kg), (b, 1, hr * wr, 1)))
        if capture is not None:
            capture["scores_gated"] = scores.data.copy()

        attn = ops.softmax_lastdim(scores)
        y = ops.matmul(attn, v)                                    # [B,heads,N,d]
        y = ops.reshape(ops.permute(y, (0, 2, 1, 3)), (b, n, c))
        if not bypass:
            y_map = gate.dispersion(tokens_to_grid(y, h, w), gas_map)
            y = grid_to_tokens(y_map)
        return self.proj(y)


class MixFfn(Layer):
    """Linear C->xC, depthwise 3x3 over the token grid, gelu, Linear xC->C."""

    def __init__(self, store, prefix, rng, dtype, channels: int, expansion: int):
        super().__init__(store, prefix, rng, dtype)
        hidden = channels * expansion
        self.fc1 = Linear(store, f"{prefix}.fc1", rng, dtype, channels, hidden)
        self.dw = Conv2d(store, f"{prefix}.dw", rng, dtype, hidden, hidden, 3,
                         pad=1, groups=hidden)
        self.fc2 = Linear(store, f"{prefix}.fc2", rng, dtype, hidden, channels)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        y = self.fc1(x)
        y = grid_to_tokens(self.dw(tokens_to_grid(y, h, w)))
        return self.fc2(ops.gelu(y))


class TgaaBlock(Layer):
    def __init__(self, store, prefix, rng, dtype, channels: int, heads: int,
                 reduction: int, expansion: int):
        super().__init__(store, prefix, rng, dtype)
        self.attn = GasAttention(store, f"{prefix}.attn", rng, dtype, channels,
                                 heads, reduction)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", rng, dtype, channels)
        self.ffn = MixFfn(store, f"{prefix}.ffn", rng, dtype, channels, expansion)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", rng, dtype, channels)

    def __call__(self, x: Tensor, gas_map: Tensor, gate: GasGate, h: int, w: int,
                 bypass: bool = False, capture: Optional[dict] = None) -> Tensor:
        z = self.attn(x, gas_map, gate, h, w, bypass=bypass, capture=capture)
        x = self.ln1(ops.add(x, z))
        return self.ln2(ops.add(x, self.ffn(x, h, w)))


class Stage(Layer):
    def __init__(self, store, prefix, rng, dtype, cin: int, channels: int,
                 k: int, stride: int, depth: int, heads: int, reduction: int,
                 expansion: int, gas_hidden: int):
        super().__init__(store, prefix, rng, dtype)
        self.k, self.stride = k, stride
        self.patch = Conv2d(store, f"{prefix}.patch", rng, dtype, cin, channels,
                            k, stride=stride, pad=k // 2)
        self.patch_norm = LayerNorm(store, f"{prefix}.patch_norm", rng, dtype, channels)
        self.gas = GasGate(store, f"{prefix}.gas", rng, dtype, channels, gas_hidden)
        self.blocks = [
            TgaaBlock(store, f"{prefix}.b{i}", rng, dtype, channels, heads,
                      reduction, expansion)
            for i in range(depth)
        ]

    def embed(self, x: Tensor) -> Tuple[Tensor, int, int]:
        grid = self.patch(x)
        _, _, h, w = grid.shape
        return self.patch_norm(grid_to_tokens(grid)), h, w


class GasEncoder:
    """The full stage pyramid.  Built for a reference input resolution, which
    fixes each stage's effective reduction ratio (clamped so the reduction
    tiles the token grid)."""

    def __init__(self, store: ParamStore, cfg: EncoderConfig, height: int, width: int,
                 rng: Rng, dtype=np.float32, prefix: str = "encoder"):
        cfg.validate()
        if height % 16 or width % 16:
            raise GeometryError(
                f"encoder input {height}x{width} must be a multiple of 16")
        self.cfg = cfg
        self.grids = stage_grids(cfg, height, width)
        self.reductions = [effective_reduction(r, h, w)
                           for r, (h, w) in zip(cfg.reduction, self.grids)]
        self.warn = {"clamped": 0}
        self.stages: List[Stage] = []
        cin = 3
        for s in range(len(cfg.channels)):
            self.stages.append(Stage(
                store, f"{prefix}.s{s + 1}", rng, dtype,
                cin, cfg.channels[s], cfg.patch_kernels[s], cfg.patch_strides[s],
                cfg.depths[s], cfg.heads[s], self.reductions[s],
                cfg.ffn_expansion, cfg.gas_hidden))
            cin = cfg.channels[s]

    def __call__(self, video: Tensor, gas: Tensor, bypass_gas: bool = False,
                 capture: Optional[List[dict]] = None) -> List[Tensor]:
        if video.ndim != 4 or gas.ndim != 4:
            raise ShapeError("encoder expects [B,3,H,W] video and [B,1,H,W] gas")
        if video.shape[0] != gas.shape[0] or video.shape[2:] != gas.shape[2:] \
                or gas.shape[1] != 1:
            raise ShapeError(
                f"video {video.shape} and gas {gas.shape} are not co-registered")
        h_in, w_in = video.shape[2], video.shape[3]
        if h_in % 16 or w_in % 16:
            raise GeometryError(f"input {h_in}x{w_in} must be a multiple of 16")

        outputs: List[Tensor] = []
        x = video
        for idx, stage in enumerate(self.stages):
            tokens, h, w = stage.embed(x)
            if h % self.reductions[idx] or w % self.reductions[idx]:
                raise GeometryError(
                    f"stage {idx + 1}: reduction {self.reductions[idx]} does not "
                    f"divide runtime grid {h}x{w}")
            gas_s = pool_gas(gas, h, w, self.warn) if not bypass_gas else gas
            for b_idx, block in enumerate(stage.blocks):
                cap = None
                if capture is not None:
                    cap = {}
                    capture.append(cap)
                tokens = block(tokens, gas_s, stage.gas, h, w,
                               bypass=bypass_gas, capture=cap)
            x = tokens_to_grid(tokens, h, w)
            outputs.append(x)
        return outputs
