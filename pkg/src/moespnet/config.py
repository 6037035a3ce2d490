"""Run configuration: model architecture, optimizer schedule, and paths.

A run is described by one JSON file::

    {"model": "moe-spnet",
     "model_config": {"num_classes": 5, "dilations": [1, 2, 4, 5]},
     "train": {"base_lr": 0.01, "max_iter": 2000, "stage2_iter": 1000},
     "paths": {"data": "data/", "out": "runs/moe"}}

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

MODEL_KINDS = ("moe-spnet", "moe-spnet-cf", "moe-spnet-ef", "deeplab-aspp-baseline",
               "fcn-ahfa", "fcn-baseline")
GATING_KINDS = {"moe-spnet": "P", "moe-spnet-cf": "CF", "moe-spnet-ef": "EF",
                "deeplab-aspp-baseline": None}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64, 128)
    dilations: tuple[int, ...] = (6, 12, 18, 24)
    expert_width: int = 64          # C2
    gate_hidden: int = 64           # C4, CF/EF variants and two-layer P
    gating_two_layer: bool = False
    gate_zero_init: bool = True
    aggregation: str = "prob"       # "prob" | "logit"
    phi_normalize: bool = True
    ahfa_weight_bias: float = 0.0
    crop_size: int = 64
    input_mean: float = 0.45        # subtracted from every input pixel before the backbone

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if len(self.backbone_widths) != 5:
            raise ConfigError(f"backbone_widths needs 5 entries, got {len(self.backbone_widths)}")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be a non-empty list of positive ints, got {self.dilations}")
        if self.aggregation not in ("prob", "logit"):
            raise ConfigError(f"aggregation must be 'prob' or 'logit', got {self.aggregation!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.crop_size % 32:
            raise ConfigError(f"crop_size must be divisible by 32, got {self.crop_size}")

    @property
    def num_experts(self) -> int:
        return len(self.dilations)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    max_iter: int = 2000            # stage 1
    stage2_iter: int = 1000
    batch: int = 2
    seed: int = 0
    augment: bool = True
    head_lr_mult: float = 10.0      # stage 2: lr multiplier for the freshly attached gating/weight heads

    def __post_init__(self):
        if self.head_lr_mult <= 0:
            raise ConfigError("head_lr_mult must be positive")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.max_iter < 1 or self.stage2_iter < 1 or self.batch < 1:
            raise ConfigError("max_iter, stage2_iter and batch must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class RunConfig:
    model: str = "moe-spnet"
    model_config: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out: str | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}; choose from {', '.join(MODEL_KINDS)}")

    def to_dict(self) -> dict:
        mc = asdict(self.model_config)
        mc["backbone_widths"] = list(mc["backbone_widths"])
        mc["dilations"] = list(mc["dilations"])
        return {"model": self.model, "model_config": mc, "train": asdict(self.train),
                "paths": {"data": self.data, "out": self.out}}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, {"model", "model_config", "train", "paths"}, "config")
        paths = d.get("paths", {}) or {}
        _reject_unknown(paths, {"data", "out"}, "paths")
        return cls(model=d.get("model", "moe-spnet"),
                   model_config=_build(ModelConfig, d.get("model_config", {}), "model_config"),
                   train=_build(TrainConfig, d.get("train", {}), "train"),
                   data=paths.get("data"), out=paths.get("out"))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def with_overrides(self, model: str | None = None, seed: int | None = None,
                       out: str | None = None, data: str | None = None) -> "RunConfig":
        cfg = self
        if model is not None:
            cfg = replace(cfg, model=model)
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=seed))
        if out is not None:
            cfg = replace(cfg, out=out)
        if data is not None:
            cfg = replace(cfg, data=data)
        return cfg


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def _build(klass, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    _reject_unknown(d, {f.name for f in fields(klass)}, where)
    try:
        return klass(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None
