"""Resolved configuration tree.

Every tunable the model, losses, data pipeline and trainer read lives here,
so a single YAML/JSON file (plus ``key=value`` overrides) fully describes a
run. Defaults reproduce the published settings.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .exceptions import ConfigError

BACKBONE_VARIANTS = tuple(f"efficientnet-b{i}" for i in range(6)) + ("tiny-test",)

# level -> (dilation kernel, erosion kernel)
DEFAULT_BGM_KERNELS = {3: (3, 5), 2: (5, 9), 1: (7, 13)}
# level -> deep-supervision weight; level 0 is the final map
DEFAULT_LAMBDAS = {3: 0.4, 2: 0.6, 1: 0.8, 0: 1.0}


@dataclass
class BackboneConfig:
    variant: str = "efficientnet-b0"
    pretrained: bool = False

    def validate(self):
        if self.variant not in BACKBONE_VARIANTS:
            raise ConfigError(
                f"backbone.variant must be one of {BACKBONE_VARIANTS}, got {self.variant!r}"
            )


@dataclass
class MgpmConfig:
    enabled: bool = True
    n: int = 2
    reduced_channels: int = 32
    out_channels: int = 64
    upsample_mode: str = "bilinear"

    def validate(self):
        if self.n < 1:
            raise ConfigError(f"mgpm.n must be >= 1, got {self.n}")
        if self.reduced_channels < 1:
            raise ConfigError("mgpm.reduced_channels must be positive")
        if self.out_channels != 64:
            raise ConfigError("mgpm.out_channels is fixed at 64")


@dataclass
class BgmConfig:
    enabled: bool = True
    kernels: dict = field(default_factory=lambda: dict(DEFAULT_BGM_KERNELS))
    detach_attention: bool = False
    reduction: int = 16
    norm_act: bool = True

    def validate(self):
        self.kernels = {int(k): tuple(int(s) for s in v) for k, v in self.kernels.items()}
        if sorted(self.kernels) != [1, 2, 3]:
            raise ConfigError(f"bgm.kernels needs entries for levels 1, 2, 3, got {sorted(self.kernels)}")
        for level, pair in self.kernels.items():
            if len(pair) != 2 or any(s < 1 or s % 2 == 0 for s in pair):
                raise ConfigError(f"bgm.kernels[{level}] must be two odd positive sizes, got {pair}")


@dataclass
class LossConfig:
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    alpha1: float = 1.0
    alpha2: float = 5.0
    k: int = 5
    epsilon: float = 1e-6
    weighted_iou: bool = False
    # the BS (boundary-enhanced) term; off reduces deep levels to plain seg loss
    boundary: bool = True

    def validate(self):
        self.lambdas = {int(k): float(v) for k, v in self.lambdas.items()}
        if 0 not in self.lambdas:
            raise ConfigError("loss.lambdas must contain the final-map weight under level 0")
        if any(v < 0 for v in self.lambdas.values()):
            raise ConfigError("loss.lambdas must be non-negative")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"loss.k must be an odd positive integer, got {self.k}")
        if self.epsilon <= 0:
            raise ConfigError("loss.epsilon must be > 0")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("loss.alpha1/alpha2 must be non-negative")


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_p: float = 0.5
    rotate_p: float = 0.5
    scale_p: float = 0.5
    max_rotation: float = 15.0
    scale_range: tuple = (0.9, 1.1)

    def validate(self):
        for name in ("flip_p", "rotate_p", "scale_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"data.augment.{name} must lie in [0, 1], got {v}")
        self.scale_range = tuple(float(s) for s in self.scale_range)
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"data.augment.scale_range invalid: {self.scale_range}")


@dataclass
class DataConfig:
    root: str | None = None
    layout: str = "busi"
    image_size: tuple = (256, 256)
    exclude_normal: bool = False
    threshold: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if len(self.image_size) != 2 or any(s <= 0 or s % 32 for s in self.image_size):
            raise ConfigError(
                f"data.image_size must be two positive multiples of 32, got {self.image_size}"
            )
        if self.layout not in ("busi", "generic"):
            raise ConfigError(f"data.layout must be 'busi' or 'generic', got {self.layout!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("data.threshold must lie in (0, 1)")
        self.augment.validate()


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 1e-3
    poly_power: float = 0.9
    schedule: str = "epoch"
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True
    steps_per_epoch: int | None = None
    num_workers: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr must be > 0")
        if self.schedule not in ("epoch", "step"):
            raise ConfigError(f"train.schedule must be 'epoch' or 'step', got {self.schedule!r}")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class PBNetConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mgpm: MgpmConfig = field(default_factory=MgpmConfig)
    bgm: BgmConfig = field(default_factory=BgmConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "PBNetConfig":
        for f in fields(self):
            getattr(self, f.name).validate()
        if self.loss.boundary and not self.bgm.enabled:
            raise ConfigError(
                "boundary-enhanced (BS) loss requires BGM: the deep probability maps it "
                "supervises are produced inside BGM"
            )
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "PBNetConfig":
        cfg = _build(cls, data or {}, "")
        return cfg.validate()

    def replace(self, **overrides) -> "PBNetConfig":
        """Return a validated copy with dotted-key overrides applied."""
        data = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(data, key.replace("__", "."), value)
        return PBNetConfig.from_dict(data)

    @property
    def ablation_flags(self) -> dict:
        return {"mgpm": self.mgpm.enabled, "bgm": self.bgm.enabled, "bs": self.loss.boundary}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k) if isinstance(k, int) else k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys under {prefix or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = copy.deepcopy(value)
    return cls(**kwargs)


def _set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``a.b=value``; the value is read as YAML so numbers/lists work."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PBNetConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        data = data or {}
    cfg = PBNetConfig.from_dict(data)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def save_config(cfg: PBNetConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def tiny_preset(**overrides) -> PBNetConfig:
    """CPU-scale preset: tiny backbone, 64x64 phantoms, short schedule."""
    base = PBNetConfig.from_dict(
        {
            "backbone": {"variant": "tiny-test"},
            "data": {"layout": "generic", "image_size": [64, 64], "augment": {"enabled": False}},
            "train": {"epochs": 300, "batch_size": 8, "base_lr": 3e-3, "weight_decay": 0.0},
        }
    )
    return base.replace(**overrides) if overrides else base
