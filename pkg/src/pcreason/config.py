"""Run configuration: one flat record of every tunable default.

Configs load from a JSON file of key/value pairs; unknown keys are rejected
before any work starts. CLI flags override file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # corpus
    objects: int = 512
    n_points: int = 1024
    seed: int = 0
    out_dir: str = "runs/corpus"
    train_ratio: float = 0.795
    val_ratio: float = 0.102
    test_ratio: float = 0.103

    # camera rig
    cam_radius: float = 2.2
    fov_deg: float = 50.0
    image_size: int = 64

    # encoders / fusion
    feature_dim: int = 64
    n_geo_tokens: int = 32
    knn_k: int = 16
    patch_grid: int = 4
    pos_bands: int = 4
    l_bands: int = 4
    enc_hidden: int = 32

    # language model
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 256

    # objectives / optimization
    lam: float = 1.0
    alpha: float = 0.1
    tau: float = 0.07
    proj_dim: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    max_decode_len: int = 48

    def validate(self) -> "RunConfig":
        if self.objects < 1 or self.n_points < 4:
            raise ConfigError("corpus sizes out of range")
        if abs(self.train_ratio + self.val_ratio + self.test_ratio - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        if self.cam_radius <= 1.0:
            raise ConfigError("camera inside object sphere")
        if self.image_size % self.patch_grid != 0:
            raise ConfigError("image size not divisible by patch grid")
        if self.d_llm % self.n_heads != 0:
            raise ConfigError("d_llm must divide evenly into heads")
        if self.tau <= 0 or self.lam < 0 or self.alpha < 0:
            raise ConfigError("invalid loss weights")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**d).validate()

    @staticmethod
    def from_file(path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return RunConfig.from_dict(data)
