"""Experiment configuration: line-based ``key = value`` text with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .io import FormatError, format_key_values, parse_key_values, text_hash
from .model import VARIANTS, BackboneConfig, ModelConfig
from .pamr import PamrConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int | None = None
    variant: str = "full"
    num_classes: int = 4
    d2: int = 32
    backbone_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    kernel_sizes: list[int] = field(default_factory=lambda: [1, 3, 5, 7])
    separate_attention: bool = False
    fusion: str = "sf2"
    tau: float = 0.6
    keep_prob: float = 0.7
    pamr_iterations: int = 10
    pamr_dilations: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    pamr_temperature: float | None = None
    seg_after_pamr: bool = False
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_multiplier: float = 20.0
    cls_epochs: int = 7
    total_epochs: int = 30
    batch_size: int = 8
    crop_size: int = 64
    scale_min: float = 0.9
    scale_max: float = 1.0
    n_train: int = 200
    n_val: int = 50
    data_seed: int = 0
    checkpoint_every: int = 10
    dataset: str = "data/shapes"
    output: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.crop_size % 8:
            raise ConfigError("crop_size must be divisible by 8")
        if not 0 <= self.cls_epochs <= self.total_epochs:
            raise ConfigError("need 0 <= cls_epochs <= total_epochs")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob must be in (0, 1]")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must be in (0, 1)")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("need 0 < scale_min <= scale_max")
        if self.batch_size < 1 or self.n_train < 1 or self.n_val < 1:
            raise ConfigError("batch_size, n_train and n_val must be >= 1")
        if self.lr <= 0 or self.lr_multiplier <= 0:
            raise ConfigError("lr and lr_multiplier must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes) or not self.kernel_sizes:
            raise ConfigError("kernel_sizes must be odd positive integers")
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes, d2=self.d2, backbone=BackboneConfig(list(self.backbone_widths)),
            kernel_sizes=list(self.kernel_sizes), separate_attention=self.separate_attention,
            fusion=self.fusion, keep_prob=self.keep_prob, tau=self.tau,
            pamr=PamrConfig(self.pamr_iterations, list(self.pamr_dilations), self.pamr_temperature))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return format_key_values({f.name: _format(getattr(self, f.name)) for f in fields(self)})

    def digest(self) -> str:
        return text_hash(self.to_text())


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, text: str, default):
    try:
        if name in ("seed", "pamr_temperature"):
            if text.lower() == "none":
                return None
            return int(text) if name == "seed" else float(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(v) for v in text.split(",") if v.strip()]
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {text!r}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = parse_key_values(text, source)
    except FormatError as exc:
        raise ConfigError(str(exc)) from None
    base = ExperimentConfig()
    known = {f.name for f in fields(base)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    values = {k: _parse(k, v, getattr(base, k)) for k, v in raw.items()}
    return base.replace(**values)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))
