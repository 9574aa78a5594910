"""Run configuration: nested dataclasses loaded from TOML.

Every table in the file mirrors a dataclass; unknown keys are errors so a
typo cannot silently fall back to a default.

    seed = 2024

    [population]
    n_persons = 4800

    [backbone]
    n_days = 30
    [backbone.weights]
    w_local = 0.25
    ...

    [embedding]
    target_prevalence = 0.00153
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .anomaly import EditBudget, EditConfig
from .backbone import BackboneConfig
from .grpo import GrpoConfig
from .model import ConfigError
from .monitor import MonitorHyper
from .population import PopulationConfig


@dataclass
class MonitorSettings:
    hyper: MonitorHyper = field(default_factory=MonitorHyper)
    context_rows: int = 4000          # rows per benign slice (training and evaluation)
    overlays_per_seed: int = 4        # positive copies of each seed in the training data
    window_days: int = 7

    def validate(self):
        if self.context_rows < 1 or self.overlays_per_seed < 1 or self.window_days < 1:
            raise ConfigError("monitor settings must be positive")


@dataclass
class AnomalySettings:
    n_seeds: int = 10
    seed_file: str | None = None
    grpo: GrpoConfig = field(default_factory=lambda: GrpoConfig(iterations=20))

    def validate(self):
        if self.seed_file is None and self.n_seeds < 1:
            raise ConfigError("need at least one seed cluster")


@dataclass
class EmbeddingSettings:
    target_prevalence: float = 0.00153
    burst_factor: float = 3.0
    max_assignments: int = 8
    # clusters are drawn from the hardened pool until this many times the
    # edges needed for the target have been queued
    oversupply: float = 1.5

    def validate(self):
        if not 0 < self.target_prevalence <= 0.05:
            raise ConfigError("target_prevalence must lie in (0, 0.05]")
        if self.burst_factor <= 0 or self.max_assignments < 1 or self.oversupply < 1:
            raise ConfigError("invalid embedding settings")


@dataclass
class OutputSettings:
    out_dir: str = "out"
    write_features: bool = False


@dataclass
class PipelineConfig:
    seed: int = 2024
    population: PopulationConfig = field(default_factory=PopulationConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    monitor: MonitorSettings = field(default_factory=MonitorSettings)
    anomaly: AnomalySettings = field(default_factory=AnomalySettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for part in (self.population, self.backbone, self.monitor, self.anomaly, self.embedding):
            if hasattr(part, "validate"):
                part.validate()


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = (f.default_factory() if f.default_factory is not dataclasses.MISSING
                   else f.default)
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value, f"{where}.{name}" if where else name)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[{where or 'root'}] {exc}") from exc


def config_from_mapping(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_mapping(data)


def with_overrides(config: PipelineConfig, seed: int | None = None, out_dir: str | Path | None = None) -> PipelineConfig:
    if seed is not None:
        config = dataclasses.replace(config, seed=int(seed))
    if out_dir is not None:
        config = dataclasses.replace(config, output=dataclasses.replace(config.output, out_dir=str(out_dir)))
    return config


def desk_config(seed: int = 2024, n_days: int = 30) -> PipelineConfig:
    return PipelineConfig(seed=seed, backbone=BackboneConfig(n_days=n_days))


def full_config(seed: int = 2024) -> PipelineConfig:
    return PipelineConfig(
        seed=seed,
        population=PopulationConfig(n_persons=48000, n_merchants=2000),
        backbone=BackboneConfig(n_days=365),
    )


__all__ = [
    "AnomalySettings", "EditBudget", "EditConfig", "EmbeddingSettings", "MonitorSettings",
    "OutputSettings", "PipelineConfig", "config_from_mapping", "desk_config", "full_config",
    "load_config", "with_overrides",
]
