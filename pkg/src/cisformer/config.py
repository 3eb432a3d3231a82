"""Configuration dataclasses and strict loading from nested dictionaries / YAML."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised when a configuration fails validation.

    ``problems`` lists every offending key with a short reason.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


UPDATE_STRATEGIES = ("composed", "separation", "sharing")
INIT_CODES = ("A", "B")


@dataclass
class EncoderConfig:
    num_layers: int = 6
    num_heads: int = 8
    num_sampling_points: int = 4
    embed_dim: int = 64
    ffn_dim: int = 256

    def validate(self) -> list[str]:
        out = []
        if self.num_layers < 1:
            out.append("encoder.num_layers: must be >= 1")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            out.append("encoder.embed_dim: must be divisible by num_heads")
        if self.num_sampling_points < 1:
            out.append("encoder.num_sampling_points: must be >= 1")
        return out


@dataclass
class SalientPointConfig:
    oversample_ratio: float = 3.0
    importance_fraction: float = 0.75
    seed: int = 0

    def validate(self) -> list[str]:
        out = []
        if self.oversample_ratio < 1:
            out.append("salient.oversample_ratio: must be >= 1")
        if not 0.0 <= self.importance_fraction <= 1.0:
            out.append("salient.importance_fraction: must lie in [0, 1]")
        return out


@dataclass
class DecoderConfig:
    scales: list[int] = field(default_factory=lambda: [4, 3, 2])
    mask_ca_layers: int = 2
    boundary_ca_layers: int = 1
    update_strategy: str = "composed"
    num_heads: int = 8
    ffn_dim: int = 256

    def validate(self) -> list[str]:
        out = []
        if not self.scales:
            out.append("decoder.scales: must be non-empty")
        if any(s not in (1, 2, 3, 4) for s in self.scales):
            out.append("decoder.scales: levels must be drawn from {1, 2, 3, 4}")
        if len(set(self.scales)) != len(self.scales):
            out.append("decoder.scales: duplicate levels")
        if self.update_strategy not in UPDATE_STRATEGIES:
            out.append(f"decoder.update_strategy: expected one of {UPDATE_STRATEGIES}")
        if self.mask_ca_layers < 1 or self.boundary_ca_layers < 1:
            out.append("decoder: cross-attention depths must be >= 1")
        return out


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_queries: int = 20
    backbone_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    salient: SalientPointConfig = field(default_factory=SalientPointConfig)
    # query initialization codes: A = salient points, B = random learned embedding.
    init_mask: str = "A"
    init_boundary: str = "B"

    def validate(self) -> list[str]:
        out = self.encoder.validate() + self.decoder.validate() + self.salient.validate()
        if self.encoder.embed_dim != self.embed_dim:
            out.append("encoder.embed_dim: must equal model.embed_dim")
        if self.embed_dim % self.decoder.num_heads:
            out.append("decoder.num_heads: must divide model.embed_dim")
        if self.num_queries < 1:
            out.append("model.num_queries: must be >= 1")
        if len(self.backbone_channels) != 4:
            out.append("model.backbone_channels: need exactly 4 stage widths")
        for name in ("init_mask", "init_boundary"):
            if getattr(self, name) not in INIT_CODES:
                out.append(f"model.{name}: expected 'A' or 'B'")
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LossWeights:
    lam: float = 2.0
    lam_loc: float = 5.0
    alpha: float = 1.0
    beta: float = 2.0

    def validate(self) -> list[str]:
        return [f"loss.{k}: must be >= 0" for k, v in dataclasses.asdict(self).items() if v < 0]


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    num_points: int = 112 * 112
    oversample_ratio: float = 3.0
    importance_ratio: float = 0.75
    sampling: str = "importance"  # importance | uniform | dense

    def validate(self) -> list[str]:
        out = self.weights.validate()
        if self.num_points < 1:
            out.append("loss.num_points: must be >= 1")
        if self.sampling not in ("importance", "uniform", "dense"):
            out.append("loss.sampling: expected importance | uniform | dense")
        if not 0.0 <= self.importance_ratio <= 1.0:
            out.append("loss.importance_ratio: must lie in [0, 1]")
        return out


@dataclass
class OptimizerConfig:
    lr: float = 2.5e-4
    weight_decay: float = 0.05
    iterations: int = 15000
    batch_size: int = 16
    grad_clip: float = 1.0
    log_every: int = 1
    checkpoint_every: int = 1000

    def validate(self) -> list[str]:
        out = []
        if self.lr <= 0:
            out.append("optimizer.lr: must be > 0")
        if self.iterations < 0:
            out.append("optimizer.iterations: must be >= 0")
        if self.batch_size < 1:
            out.append("optimizer.batch_size: must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            out.append("optimizer: log_every / checkpoint_every must be >= 1")
        return out


@dataclass
class SynthConfig:
    image_size: int = 96
    min_instances: int = 1
    max_instances: int = 4
    contrast: float = 0.06
    texture_std: float = 0.08
    boundary_width: int = 2

    def validate(self) -> list[str]:
        out = []
        if self.image_size < 32:
            out.append("data.synthetic.image_size: must be >= 32")
        if not 1 <= self.min_instances <= self.max_instances:
            out.append("data.synthetic: need 1 <= min_instances <= max_instances")
        if self.contrast < 0:
            out.append("data.synthetic.contrast: must be >= 0")
        if self.boundary_width < 1:
            out.append("data.synthetic.boundary_width: must be >= 1")
        return out


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | annotations
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    num_train: int = 16
    num_val: int = 16
    train_annotations: str | None = None
    val_annotations: str | None = None
    flip: bool = False

    def validate(self) -> list[str]:
        out = self.synthetic.validate()
        if self.kind not in ("synthetic", "annotations"):
            out.append("data.kind: expected synthetic | annotations")
        if self.kind == "annotations" and not self.train_annotations:
            out.append("data.train_annotations: required when kind = annotations")
        return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    score_threshold: float = 0.5
    mask_threshold: float = 0.5

    def validate(self) -> None:
        problems = (self.model.validate() + self.optimizer.validate()
                    + self.loss.validate() + self.data.validate())
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: Any, prefix: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{prefix or '<root>'}: expected a mapping")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            problems.append(f"{path}: unknown key")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path, problems)
        else:
            kwargs[key] = _coerce(value, default, path, problems)
    return cls(**kwargs)


def _coerce(value, default, path, problems):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return value
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        problems.append(f"{path}: expected a string")
    return value


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build and validate a :class:`RunConfig`; unknown keys are rejected."""
    problems: list[str] = []
    cfg = _build(RunConfig, data or {}, "", problems)
    if problems:
        raise ConfigError(problems)
    cfg.validate()
    return cfg


def deep_update(base: dict, delta: dict) -> dict:
    out = dict(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if overrides:
        data = deep_update(data, overrides)
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def desk_profile() -> dict[str, Any]:
    """Small-footprint settings used by the tests and demo scripts."""
    return {
        "model": {"embed_dim": 64, "num_queries": 20},
        "optimizer": {"lr": 1e-3, "iterations": 1000, "batch_size": 4,
                      "checkpoint_every": 500},
        "loss": {"num_points": 1024},
        "data": {"num_train": 16, "num_val": 16},
    }
