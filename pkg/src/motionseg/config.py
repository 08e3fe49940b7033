"""Experiment configuration: every tunable in one serializable record."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .crf import CrfParams


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    # model
    num_channels: int = 4
    lam: float = 10.0  # residual flow bound, pixels
    residual: str = "pixelwise"  # pixelwise | scaling | affine | none
    feature_merging: bool = True
    backbone_channels: tuple = (16, 32, 64, 64)
    head_hidden: int = 64
    mlp_hidden: int = 64
    # losses
    w_app: float = 2.0
    w_motion: float = 0.1
    # optimization
    stage1_iters: int = 2000
    stage2_iters: int = 100
    batch_size: int = 8  # frame pairs per step
    lr: float = 1e-4
    lr_power: float = 0.9  # polynomial decay factor
    min_lr: float = 1e-6
    stage2_lr: float = 1e-4
    weight_decay: float = 1e-6
    seed: int = 0
    # appearance refinement
    semantic_constraint: bool = True
    semantic_tau: float = 0.3
    dilation_size: int = 3
    guard_width_frac: float = 0.8
    guard_height_frac: float = 0.9
    aux_provider: str = "color_stats"
    aux_window: int = 5
    crf: CrfParams = field(default_factory=CrfParams)
    # evaluation
    post_crf: bool = False
    binarize_threshold: float = 0.5
    # data and logistics
    dataset: str = ""
    workdir: str = ""
    photometric_jitter: bool = True
    jitter_strength: float = 0.08
    tuner_first_frame_only: bool = False
    determinism: bool = True
    num_threads: int = 0  # 0 keeps the torch default

    def __post_init__(self):
        if self.num_channels < 2:
            raise ConfigError("num_channels must be at least 2")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        for name in ("w_app", "w_motion", "lr", "stage2_lr", "weight_decay", "min_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.residual not in ("pixelwise", "scaling", "affine", "none"):
            raise ConfigError(f"unknown residual variant {self.residual!r}")
        if self.batch_size < 1 or self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("batch_size/iteration counts out of range")
        if isinstance(self.crf, dict):
            self.crf = CrfParams(**self.crf)
        self.backbone_channels = tuple(self.backbone_channels)
        if self.semantic_constraint and self.aux_provider in ("none", "", None):
            raise ConfigError("semantic_constraint requires an aux feature provider")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def replace(self, **updates) -> "ExperimentConfig":
        return dataclasses.replace(self, **updates)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]
