"""Plain-text configuration: ``section.key = value`` lines with ``#`` comments.

Unknown keys are rejected; parse -> serialize -> parse is a fixed point.  The
defaults reproduce the full model variant (every ablation toggle off).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Tuple

from .errors import ConfigError


@dataclass
class DataCfg:
    height: int = 64
    width: int = 80
    frames: int = 16
    train_seed: int = 42
    teacher_seed: int = 9001


@dataclass
class EncoderCfg:
    channels: Tuple[int, ...] = (32, 64, 160, 256)
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    patch_kernels: Tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: Tuple[int, ...] = (4, 2, 2, 2)
    reduction: Tuple[int, ...] = (8, 4, 2, 1)
    heads: Tuple[int, ...] = (1, 2, 5, 8)
    ffn_expansion: int = 4
    gas_hidden: int = 8


@dataclass
class HeadCfg:
    embed_dim: int = 128
    prior_channels: int = 16
    prior_source: str = "gt"  # gt | pred (training-time source of the prev mask)


@dataclass
class AtfCfg:
    dim: int = 256
    hidden: int = 128
    classes: int = 3
    temporal_scale_init: float = 1.0
    residual_scale_init: float = 0.1


@dataclass
class LossCfg:
    lambda_seg: float = 1.0
    lambda_cls: float = 0.5
    dice_eps: float = 1.0


@dataclass
class CurriculumCfg:
    epochs_s1a: int = 8
    epochs_s1b: int = 12
    epochs_s2_warmup: int = 6
    epochs_s2_main: int = 10
    epochs_s3_atf: int = 15
    epochs_s3_e2e: int = 8
    lr_s1a: float = 1e-4
    lr_s1b: float = 6e-5
    lr_s2: float = 1e-4
    lr_s3: float = 6e-5
    weight_decay: float = 0.01
    frame_batch: int = 8
    clip_batch: int = 2
    grad_accum: int = 4


@dataclass
class AblationCfg:
    no_tgaa: bool = False
    no_psi: bool = False
    no_atf: bool = False
    no_s2: bool = False
    no_e2e: bool = False
    equal_lambda: bool = False
    concat_fusion: bool = False


@dataclass
class SynthCfg:
    period_hf: int = 8
    period_ctrl: int = 12
    period_lf: int = 18
    amp_hf: float = 0.9
    amp_ctrl: float = 0.6
    amp_lf: float = 0.35
    amp_jitter: float = 0.35
    noise_bg: float = 0.08
    tau_gt: float = 0.12
    sigma0: float = 2.5
    growth: float = 0.6
    wind_min: float = 0.3
    wind_max: float = 1.2
    class_frac_hf: float = 0.3310185
    class_frac_ctrl: float = 0.3611111
    split_train: float = 0.6990741
    split_val: float = 0.0763889


@dataclass
class MetricsCfg:
    bf1_tolerance: float = 2.0


@dataclass
class TraceConfig:
    data: DataCfg = field(default_factory=DataCfg)
    encoder: EncoderCfg = field(default_factory=EncoderCfg)
    head: HeadCfg = field(default_factory=HeadCfg)
    atf: AtfCfg = field(default_factory=AtfCfg)
    loss: LossCfg = field(default_factory=LossCfg)
    curriculum: CurriculumCfg = field(default_factory=CurriculumCfg)
    ablation: AblationCfg = field(default_factory=AblationCfg)
    synth: SynthCfg = field(default_factory=SynthCfg)
    metrics: MetricsCfg = field(default_factory=MetricsCfg)

    def validate(self) -> "TraceConfig":
        d = self.data
        if d.height % 16 or d.width % 16:
            raise ConfigError(
                f"data.height/data.width must be multiples of 16, got {d.height}x{d.width}")
        if d.frames < 1:
            raise ConfigError("data.frames must be positive")
        if self.loss.lambda_seg < 0 or self.loss.lambda_cls < 0:
            raise ConfigError("loss weights must be non-negative")
        if min(self.curriculum.frame_batch, self.curriculum.clip_batch,
               self.curriculum.grad_accum) < 1:
            raise ConfigError("batch sizes and accumulation must be >= 1")
        if self.head.prior_source not in ("gt", "pred"):
            raise ConfigError(f"head.prior_source must be gt|pred, got {self.head.prior_source}")
        for name in ("lr_s1a", "lr_s1b", "lr_s2", "lr_s3"):
            if getattr(self.curriculum, name) <= 0:
                raise ConfigError(f"curriculum.{name} must be positive")
        return self

    # convenience views ------------------------------------------------------

    @property
    def gas_gating_off(self) -> bool:
        """Either gas-ablation toggle bypasses all gas conditioning."""
        return self.ablation.no_psi or self.ablation.no_tgaa

    def effective_lambdas(self) -> Tuple[float, float]:
        if self.ablation.equal_lambda:
            return 0.5, 0.5
        return self.loss.lambda_seg, self.loss.lambda_cls


_SECTIONS = [f.name for f in fields(TraceConfig)]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, template) -> object:
    text = text.strip()
    try:
        if isinstance(template, bool):
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if isinstance(template, tuple):
            return tuple(int(x) for x in text.split(","))
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"cannot parse value {text!r}") from e


def serialize_config(cfg: TraceConfig) -> str:
    lines = ["# tracegas configuration"]
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        lines.append("")
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TraceConfig:
    cfg = TraceConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} is missing its section")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        sub = getattr(cfg, section)
        if name not in {f.name for f in fields(sub)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(sub, name, _parse_value(value, getattr(sub, name)))
    return cfg.validate()


def load_config(path: str) -> TraceConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: TraceConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
