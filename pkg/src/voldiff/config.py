"""Experiment configuration: a YAML file with fixed sections, strict key
checking, and a stable content hash logged with every run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


def _from_mapping(cls, mapping, section):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(
            f"unknown key(s) in section '{section}': {sorted(unknown)}"
        )
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in mapping:
            value = mapping[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class DataConfig:
    families: tuple = ("ellipsoid-organ", "tube-vessel")
    extent: tuple = (32, 32, 32)
    count: int = 8
    mask_kind: str = "gaussian-1d"
    acceleration: float = 8.0


@dataclass(frozen=True)
class PvaeConfig:
    patch_shape: tuple = (64, 64, 64)
    codebook_size: int = 8192
    code_dim: int = 8
    channels: tuple = (32, 64, 128)
    lambda_adv: float = 2.0
    lambda_tp: float = 4.0
    lr_stage1: float = 3e-4
    lr_stage2: float = 3e-5
    disc_warmup: int = 500
    steps_stage1: int = 5000
    steps_stage2: int = 1000
    batch_size: int = 8
    reseed_interval: int = 250


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 1000
    cosine_offset: float = 0.008
    lr: float = 1e-4
    steps: int = 4000
    batch_size: int = 4


@dataclass(frozen=True)
class BiFlowNetConfig:
    patch_extent: int = 4       # latent voxels per axis per intra-flow patch
    token_size: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    unet_channels: tuple = (32, 64)
    num_classes: int = 2
    intra_enabled: bool = True

    def __post_init__(self):
        if self.depth < 4:
            raise ConfigError("depth must be >= 4 (first/last two blocks fuse)")
        if self.patch_extent % self.token_size != 0:
            raise ConfigError("token_size must divide patch_extent")


@dataclass(frozen=True)
class ControlNetConfig:
    lr: float = 1e-4
    steps: int = 2000
    batch_size: int = 4


@dataclass(frozen=True)
class MetricsConfig:
    feature_dim: int = 128
    extractor_seed: int = 0


@dataclass(frozen=True)
class RuntimeConfig:
    seed: int = 0
    device: str = "cpu"
    run_dir: str = "runs"
    log_interval: int = 50
    threads: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pvae: PvaeConfig = field(default_factory=PvaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    biflownet: BiFlowNetConfig = field(default_factory=BiFlowNetConfig)
    controlnet: ControlNetConfig = field(default_factory=ControlNetConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        if mapping is None:
            mapping = {}
        sections = {
            "data": DataConfig,
            "pvae": PvaeConfig,
            "diffusion": DiffusionConfig,
            "biflownet": BiFlowNetConfig,
            "controlnet": ControlNetConfig,
            "metrics": MetricsConfig,
            "runtime": RuntimeConfig,
        }
        unknown = set(mapping) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {
            name: _from_mapping(sec_cls, mapping.get(name), name)
            for name, sec_cls in sections.items()
        }
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            mapping = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config {path}: {exc}") from exc
        return cls.from_mapping(mapping)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
