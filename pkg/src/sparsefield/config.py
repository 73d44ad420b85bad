"""Versioned JSON pipeline configuration."""

import dataclasses
import json
from dataclasses import dataclass

from .field import DEFAULT_K, EPS_HIT
from .optimizer import EnergyConfig
from .pruner import PruneConfig
from .refiner import TrainConfig
from .synth import SynthSceneSpec, derive_seed

CONFIG_VERSION = 1
STAGES = ("synth", "train", "prune", "energy")


class ConfigError(ValueError):
    pass


@dataclass
class IngestConfig:
    sample_mode: str = "nearest"  # "nearest" | "bilinear"
    normalize: bool = False

    def __post_init__(self):
        if self.sample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown sample_mode {self.sample_mode!r}")


@dataclass
class FieldConfig:
    mode: str = "exact"
    k: int = DEFAULT_K
    eps_hit: float = EPS_HIT

    def __post_init__(self):
        if self.mode not in ("exact", "knn"):
            raise ValueError(f"unknown field mode {self.mode!r}")
        if self.k < 1 or self.eps_hit <= 0:
            raise ValueError("field k must be >= 1 and eps_hit positive")


@dataclass
class PathConfig:
    source: str = None
    target: str = None
    hand: str = None  # effector spec JSON; None selects the bundled hand
    demo: str = None  # demonstration state; None derives one from the source scene
    out: str = None


_SECTIONS = {
    "ingest": IngestConfig,
    "train": TrainConfig,
    "prune": PruneConfig,
    "field": FieldConfig,
    "energy": EnergyConfig,
    "synth": SynthSceneSpec,
    "paths": PathConfig,
}


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    ingest: IngestConfig = dataclasses.field(default_factory=IngestConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    prune: PruneConfig = dataclasses.field(default_factory=PruneConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    energy: EnergyConfig = dataclasses.field(default_factory=EnergyConfig)
    synth: SynthSceneSpec = dataclasses.field(default_factory=SynthSceneSpec)
    paths: PathConfig = dataclasses.field(default_factory=PathConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"version", "seed", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        kw = {"version": version, "seed": int(d.get("seed", 0))}
        for name, typ in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be an object")
            bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kw[name] = typ(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**kw)

    def to_dict(self):
        out = {"version": self.version, "seed": self.seed}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def stage_seed(self, stage):
        return stage_seed(self.seed, stage)

    def seeded(self):
        """Copy whose stage configs carry seeds derived from the global seed."""
        cfg = PipelineConfig.from_dict(self.to_dict())
        for stage in STAGES:
            setattr(cfg, stage, dataclasses.replace(getattr(cfg, stage), seed=cfg.stage_seed(stage)))
        return cfg


def stage_seed(seed, stage):
    return derive_seed(seed, "stage", stage) % (2**32)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return PipelineConfig.from_dict(d)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
