"""Run configuration: model architecture, diffusion schedule, training and data knobs.

Every field has a home in a YAML run config; the CLI only overrides values.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


@dataclass
class ModelConfig:
    groups: int = 6
    blocks_per_group: int = 3
    channels: int = 180
    window: tuple[int, int] = (8, 32)
    heads: int = 6
    cz: int = 256
    scale: int = 4
    ffn_expansion: float = 2.0
    # initial CW-SA temperature is sqrt(h * w) of this LR patch size
    temperature_patch: tuple[int, int] = (48, 48)
    encoder_width: int = 64
    encoder_blocks: int = 4
    head_width: int = 64
    # ablation: model1 = no prior, model2 = degradation branch only,
    # model3 = content branch only, model4 = full CDP
    variant: str = "model4"

    def validate(self) -> list[str]:
        errs = []
        if self.groups < 1 or self.blocks_per_group < 1:
            errs.append("model.groups and model.blocks_per_group must be >= 1")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            errs.append(f"model.channels ({self.channels}) must be divisible by model.heads ({self.heads})")
        if len(self.window) != 2 or min(self.window) < 1:
            errs.append("model.window must be two positive ints")
        if self.cz < 1:
            errs.append("model.cz must be >= 1")
        if self.scale < 1:
            errs.append("model.scale must be >= 1")
        if self.variant not in ("model1", "model2", "model3", "model4"):
            errs.append(f"model.variant must be one of model1..model4, got {self.variant!r}")
        return errs

    @property
    def use_prior(self) -> bool:
        return self.variant != "model1"

    @property
    def use_degradation_branch(self) -> bool:
        return self.variant in ("model2", "model4")

    @property
    def use_content_branch(self) -> bool:
        return self.variant in ("model3", "model4")


@dataclass
class DiffusionConfig:
    steps: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    hidden: int = 512
    blocks: int = 4
    time_dim: int = 64

    def validate(self) -> list[str]:
        errs = []
        if self.steps < 1:
            errs.append("diffusion.steps must be >= 1")
        if not (0 < self.beta_start < 1 and 0 < self.beta_end < 1):
            errs.append("diffusion.beta_start and diffusion.beta_end must lie in (0, 1)")
        return errs


@dataclass
class DegradationSampling:
    """Ranges the trainer draws one DegradationSpec per batch from."""

    kernel_type: str = "isotropic"
    width_range: tuple[float, float] = (0.2, 4.0)
    sigma_range: tuple[float, float] = (0.2, 4.0)
    noise_range: tuple[float, float] = (0.0, 0.0)
    kernel_size: int = 21

    def validate(self) -> list[str]:
        errs = []
        if self.kernel_type not in ("isotropic", "anisotropic", "none"):
            errs.append(f"train.degradation.kernel_type unknown: {self.kernel_type!r}")
        if self.kernel_size % 2 == 0:
            errs.append("train.degradation.kernel_size must be odd")
        if self.width_range[0] < 0 or self.width_range[1] < self.width_range[0]:
            errs.append("train.degradation.width_range must be an increasing non-negative pair")
        if self.noise_range[0] < 0 or self.noise_range[1] < self.noise_range[0]:
            errs.append("train.degradation.noise_range must be an increasing non-negative pair")
        return errs


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 300
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 4
    lr: float = 1e-4
    lr_halving_period: int = 125
    adam_betas: tuple[float, float] = (0.9, 0.99)
    alpha_rec: float = 0.01
    patch_size: int = 48  # LR space
    grad_clip: float = 1.0
    freeze_gt_encoder: bool = True
    seed: int = 0
    log_every: int = 1
    hr_dir: str | None = None
    # number of fixed HR patches drawn once (0 = fresh random crops every step)
    fixed_patches: int = 0
    degradation: DegradationSampling = field(default_factory=DegradationSampling)

    def validate(self) -> list[str]:
        errs = []
        if self.stage not in (1, 2):
            errs.append(f"train.stage must be 1 or 2, got {self.stage}")
        if self.lr <= 0:
            errs.append("train.lr must be > 0")
        if self.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        if self.alpha_rec < 0:
            errs.append("train.alpha_rec must be >= 0")
        if self.lr_halving_period < 1:
            errs.append("train.lr_halving_period must be >= 1")
        if self.patch_size < 1:
            errs.append("train.patch_size must be >= 1")
        errs += self.degradation.validate()
        return errs


@dataclass
class RunConfig:
    name: str = "baseline"
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metric_space: str = "y"
    device: str = "cpu"
    dtype: str = "float32"

    def validate(self) -> None:
        errs = self.model.validate() + self.diffusion.validate() + self.train.validate()
        if self.metric_space not in ("y", "rgb"):
            errs.append(f"metric_space must be 'y' or 'rgb', got {self.metric_space!r}")
        if self.dtype not in ("float32", "float64"):
            errs.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if errs:
            raise ConfigError("; ".join(errs))

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def arch_hash(self) -> str:
        """Hash of everything that determines parameter shapes."""
        arch = {"model": _plain(dataclasses.asdict(self.model)), "diffusion": _plain(dataclasses.asdict(self.diffusion))}
        return _digest(arch)

    def config_hash(self) -> str:
        return _digest(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict[str, Any] | None, prefix: str):
    data = dict(data or {})
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys under {prefix or 'root'}: {sorted(unknown)}")
    for key, value in data.items():
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{prefix}{key}.")
        elif isinstance(default, tuple) and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return from_dict(data)


def builtin_config(name: str) -> RunConfig:
    """Load one of the shipped configs: baseline, small, toy."""
    ref = resources.files("cdformer") / "configs" / f"{name}.yaml"
    if not ref.is_file():
        raise ConfigError(f"no built-in config named {name!r}")
    return from_dict(yaml.safe_load(ref.read_text()))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted ``key=value`` overrides (values parsed as YAML)."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in override: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key in override: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)
