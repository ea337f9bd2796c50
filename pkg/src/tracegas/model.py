"""Full dual-task model: encoder + decode head + temporal fusion + flux head.

Parameter names are grouped under four prefixes -- ``encoder.``, ``head.``,
``atf.`` and ``cls.`` -- which the curriculum uses as freeze units.  All
weights derive from the configured training seed, so two builds with the same
config are bitwise identical.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .atf import Classifier, TemporalFusion
from .config import TraceConfig
from .encoder import EncoderConfig, GasEncoder
from .errors import ShapeError
from .numerics import ParamStore, Rng, Tensor, no_grad, ops
from .seg_head import SegHead, binarize

GROUPS = ("encoder", "head", "atf", "cls")


class TraceModel:
    def __init__(self, cfg: TraceConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.store = ParamStore()
        rng = Rng(cfg.data.train_seed, "weights")
        enc_cfg = EncoderConfig(
            channels=cfg.encoder.channels, depths=cfg.encoder.depths,
            patch_kernels=cfg.encoder.patch_kernels,
            patch_strides=cfg.encoder.patch_strides,
            reduction=cfg.encoder.reduction, heads=cfg.encoder.heads,
            ffn_expansion=cfg.encoder.ffn_expansion,
            gas_hidden=cfg.encoder.gas_hidden)
        self.encoder = GasEncoder(self.store, enc_cfg, cfg.data.height,
                                  cfg.data.width, rng, dtype, prefix="encoder")
        self.head = SegHead(self.store, "head", rng, dtype, cfg.encoder.channels,
                            embed_dim=cfg.head.embed_dim,
                            prior_channels=cfg.head.prior_channels)
        if cfg.ablation.no_atf:
            self.fusion = None
        else:
            self.fusion = TemporalFusion(self.store, "atf", rng, dtype,
                                         dim=cfg.atf.dim,
                                         prior_channels=cfg.head.prior_channels,
                                         concat_fusion=cfg.ablation.concat_fusion)
            if not cfg.ablation.concat_fusion:
                self.fusion.temporal_scale.data[...] = cfg.atf.temporal_scale_init
                self.fusion.residual_scale.data[...] = cfg.atf.residual_scale_init
        self.classifier = Classifier(self.store, "cls", rng, dtype,
                                     dim=cfg.atf.dim, hidden=cfg.atf.hidden,
                                     classes=cfg.atf.classes)

    # -- parameter bookkeeping ------------------------------------------------

    def groups_present(self) -> Tuple[str, ...]:
        return tuple(g for g in GROUPS if any(
            n.startswith(g + ".") for n in self.store.names()))

    def set_trainable_groups(self, groups, exclude_prefixes=()) -> None:
        groups = tuple(g + "." for g in groups)
        exclude = tuple(exclude_prefixes)

        def trainable(name: str) -> bool:
            if any(name.startswith(e) for e in exclude):
                return False
            return any(name.startswith(g) for g in groups)

        self.store.set_trainable(trainable)

    def param_count(self, prefix: str = "") -> int:
        return self.store.count(prefix)

    # -- forward passes --------------------------------------------------------

    def _as_input(self, arr: np.ndarray) -> Tensor:
        return ops.constant(np.asarray(arr, dtype=self.dtype), dtype=self.dtype)

    def forward_frame(self, video: Tensor, gas: Tensor, prev_mask: Tensor,
                      prior_feats: Optional[Tensor] = None,
                      capture: Optional[list] = None) -> Tuple[List[Tensor], Tensor]:
        """Single-frame pass: stage maps plus the segmentation logit map."""
        stages = self.encoder(video, gas, bypass_gas=self.cfg.gas_gating_off,
                              capture=capture)
        logits = self.head(stages, prev_mask, prior_feats=prior_feats)
        return stages, logits

    def forward_clip(self, video_seq: np.ndarray, gas_seq: np.ndarray,
                     prev_masks: np.ndarray
                     ) -> Tuple[Tensor, Tensor]:
        """Clip pass for training: per-frame seg logits and clip flux logits.

        Inputs are numpy arrays shaped [B, T, C, H, W]; frames are folded into
        the batch for the per-frame trunk and unfolded for temporal fusion.
        """
        b, t = video_seq.shape[:2]
        h, w = video_seq.shape[3], video_seq.shape[4]
        video = self._as_input(video_seq.reshape(b * t, 3, h, w))
        gas = self._as_input(gas_seq.reshape(b * t, 1, h, w))
        prev = self._as_input(prev_masks.reshape(b * t, 1, h, w))

        # full 16-channel prior features are only needed by stream A
        prior_feats = None if self.fusion is None else self.head.prior(prev)
        stages, seg_logits = self.forward_frame(video, gas, prev,
                                                prior_feats=prior_feats)
        seg_logits = ops.reshape(seg_logits, (b, t, 1, h, w))

        f4 = stages[-1]
        c4, h4, w4 = f4.shape[1], f4.shape[2], f4.shape[3]
        f4_seq = ops.reshape(f4, (b, t, c4, h4, w4))
        if self.fusion is None:
            last = ops.reshape(ops.narrow(f4_seq, 1, t - 1, 1), (b, c4, h4, w4))
            embedding = ops.tmean(last, axis=(2, 3))
        else:
            pc = self.cfg.head.prior_channels
            prior_seq = ops.reshape(prior_feats, (b, t, pc, h, w))
            a = self.fusion.stream_a(prior_seq)
            bb = self.fusion.stream_b(f4_seq)
            mean_frame = self._as_input(video_seq.mean(axis=1))
            cc = self.fusion.stream_c(mean_frame)
            embedding = self.fusion.fuse(a, bb, cc)
        cls_logits = self.classifier(embedding)
        return seg_logits, cls_logits

    # -- inference --------------------------------------------------------------

    def predict_clip(self, video_seq: np.ndarray, gas_seq: np.ndarray
                     ) -> Tuple[np.ndarray, np.ndarray]:
        """Autoregressive inference over one batch of clips.

        The previous frame's *binarized prediction* feeds each frame's mask
        prior (frame 0 gets zeros).  Returns (masks [B,T,1,H,W] in {0,1},
        flux logits [B, classes]).
        """
        b, t = video_seq.shape[:2]
        h, w = video_seq.shape[3], video_seq.shape[4]
        with no_grad():
            prev = np.zeros((b, 1, h, w), dtype=self.dtype)
            masks = np.zeros((b, t, 1, h, w), dtype=self.dtype)
            prev_seq = np.zeros((b, t, 1, h, w), dtype=self.dtype)
            for ti in range(t):
                prev_seq[:, ti] = prev
                _, logits = self.forward_frame(
                    self._as_input(video_seq[:, ti]),
                    self._as_input(gas_seq[:, ti]),
                    self._as_input(prev))
                prev = binarize(logits)
                masks[:, ti] = prev
            _, cls_logits = self.forward_clip(video_seq, gas_seq, prev_seq)
        return masks, cls_logits.data.copy()


def teacher_forced_prev_masks(masks: np.ndarray) -> np.ndarray:
    """Shift ground-truth masks one frame forward; frame 0 gets zeros.

    masks: [B, T, 1, H, W] -> same shape containing frame t-1 at index t.
    """
    out = np.zeros_like(masks)
    out[:, 1:] = masks[:, :-1]
    return out
