"""Run configuration: one YAML/JSON file of named sections plus dotted overrides.

Example::

    optimizer: {lr: 1.0e-3, iterations: 4000}
    ablation: {clustered_batches: false}
    paths: {workdir: runs/no-clusters}

Unknown sections or keys are rejected so that typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .database import TilingConfig
from .features import ExtractorConfig
from .geodesy import VisibilityParams
from .synthetic import WorldConfig
from .training.augment import AugmentationRanges
from .training.clustering import BatchSpec, ClusterConfig
from .training.losses import LossParams
from .training.trainer import AblationConfig, OptimizerConfig, ReplayConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SourceConfig:
    kind: str = "synthetic"  # "synthetic" or "xyz"
    endpoint: str = ""  # XYZ template with {year}, {z}, {x}, {y}
    catalog: str = ""  # query catalog (JSONL) for the xyz source
    query_images: str = ""  # directory of <query id>.png/.jpg for the xyz source
    num_queries: int = 1000
    bbox: tuple = ()  # (lat_min, lat_max, lon_min, lon_max) region filter for the xyz source
    poi_lat: float | None = None
    poi_lon: float | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "xyz"):
            raise ValueError(f"source.kind must be 'synthetic' or 'xyz', not {self.kind!r}")
        if self.kind == "xyz" and not self.endpoint:
            raise ValueError("source.endpoint is required for the xyz source")
        if self.bbox and len(self.bbox) != 4:
            raise ValueError("source.bbox needs lat_min, lat_max, lon_min, lon_max")
        if self.num_queries < 0:
            raise ValueError("source.num_queries must be non-negative")


@dataclass(frozen=True)
class Seeds:
    world: int = 0
    queries: int = 1
    train: int = 0
    eval: int = 0

    @classmethod
    def from_base(cls, seed: int) -> "Seeds":
        return cls(world=seed, queries=seed + 1, train=seed, eval=seed)


@dataclass(frozen=True)
class EvalConfig:
    ns: tuple = (1, 10, 100)
    dedup: bool = False  # True keeps one prediction per (region, year)
    random_trials: int = 100
    index_years: tuple = (2021,)
    use_head: bool = True

    def __post_init__(self):
        if not self.ns or min(self.ns) < 1:
            raise ValueError("eval.ns must be positive integers")
        if self.random_trials < 1:
            raise ValueError("eval.random_trials must be at least 1")


@dataclass(frozen=True)
class Paths:
    """Artifact locations; the subdirectories are relative to ``workdir``."""
    workdir: str = "run"
    cache_dir: str = "cache"
    features: str = "features"
    train: str = "train"
    index: str = "index"
    reports: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. Defaults are the desk-scale synthetic setting."""

    tiling: TilingConfig = field(default_factory=lambda: TilingConfig(zooms=(11,), image_px=64))
    visibility: VisibilityParams = field(default_factory=VisibilityParams)
    extractor: ExtractorConfig = field(default_factory=lambda: ExtractorConfig(dim=224, grid=4))
    loss: LossParams = field(default_factory=LossParams)
    # 500 regions / 32 quadruplets per batch leaves room for about 8 clusters
    clusters: ClusterConfig = field(default_factory=lambda: ClusterConfig(num_clusters=8, refresh_every=2000))
    batch: BatchSpec = field(default_factory=BatchSpec)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-3, iterations=4000))
    replay: ReplayConfig = field(default_factory=lambda: ReplayConfig(pool_batches=100))
    ablation: AblationConfig = field(default_factory=AblationConfig)
    augmentation: AugmentationRanges = field(default_factory=AugmentationRanges)
    world: WorldConfig = field(default_factory=WorldConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    seeds: Seeds = field(default_factory=Seeds)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)
    jobs: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)


def _coerce(value, current):
    """Match YAML/JSON scalars and lists to the type of the default."""
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    default = cls()
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        current = getattr(default, name)
        if is_dataclass(current):
            merged = dataclasses.asdict(current)
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name}: expected a mapping")
            merged.update(value)
            kwargs[name] = _build(type(current), merged, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, current)
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d or {}, "config")


def parse_override(text: str) -> tuple[list, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides) -> dict:
    d = json.loads(json.dumps(d or {}))
    for text in overrides or ():
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
        node[path[-1]] = value
    return d


def load_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        try:
            raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        raw = raw or {}
    return config_from_dict(apply_overrides(raw, overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True)
