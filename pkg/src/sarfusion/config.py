"""Experiment configuration: one TOML or JSON document, validated up front."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .finetune_eval import FinetuneConfig
from .pretrain import OBJECTIVES, PretrainConfig
from .synthgen import SynthConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("data", "synth", "pretrain", "finetune", "grid")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    labeled_root: str | None = None  # defaults to root


@dataclass
class LocationConfig:
    mode: str = "clustered"  # "uniform", "clustered" or "file"
    n_clusters: int = 8
    cluster_radius_deg: float = 0.4
    path: str | None = None  # JSON list of [lon, lat] when mode == "file"

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "clustered", "file"):
            raise ConfigError("synth.locations.mode must be uniform, clustered or file")
        if self.mode == "file" and not self.path:
            raise ConfigError("synth.locations.path is required when mode = 'file'")


@dataclass
class GridConfig:
    objectives: list = field(default_factory=lambda: list(OBJECTIVES))
    encoders: list = field(default_factory=lambda: ["resnet18", "resnet34", "resnet18attn"])
    workers: int = 1
    max_cells: int | None = None  # stop after this many newly executed cells

    def __post_init__(self) -> None:
        bad = [o for o in self.objectives if o not in OBJECTIVES]
        if bad:
            raise ConfigError(f"unknown grid objectives {bad}")
        if self.workers < 1:
            raise ConfigError("grid.workers must be >= 1")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    locations: LocationConfig = field(default_factory=LocationConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    @property
    def labeled_root(self) -> str:
        return self.data.labeled_root or self.data.root

    def to_dict(self) -> dict:
        synth = {f.name: getattr(self.synth, f.name) for f in dataclasses.fields(SynthConfig)}
        synth["class_signatures"] = np.asarray(self.synth.class_signatures).tolist()
        synth["locations"] = dataclasses.asdict(self.locations)
        return {
            "data": dataclasses.asdict(self.data),
            "synth": synth,
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "grid": dataclasses.asdict(self.grid),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def with_overrides(self, seed: int | None = None, deterministic: bool | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            for sec in ("synth", "pretrain", "finetune"):
                d[sec]["seed"] = seed
        if deterministic:
            d["pretrain"]["deterministic"] = d["finetune"]["deterministic"] = True
        return from_dict(d)


def _build(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def from_dict(d: dict) -> ExperimentConfig:
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    synth = dict(d.get("synth", {}))
    loc = synth.pop("locations", {})
    return ExperimentConfig(
        data=_build(DataConfig, "data", d.get("data", {})),
        synth=_build(SynthConfig, "synth", synth),
        locations=_build(LocationConfig, "synth.locations", loc),
        pretrain=_build(PretrainConfig, "pretrain", d.get("pretrain", {})),
        finetune=_build(FinetuneConfig, "finetune", d.get("finetune", {})),
        grid=_build(GridConfig, "grid", d.get("grid", {})),
    )


def load_config(path=None) -> ExperimentConfig:
    """Parse ``path`` (``.toml`` or ``.json``); ``None`` gives all defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    text = path.read_text()
    try:
        d = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(d)
