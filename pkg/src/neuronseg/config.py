"""Pipeline configuration.

A config file is TOML with a top-level ``seed`` and one table per stage::

    seed = 0

    [gen]
    levels = ["sparse", "dense", "very-dense"]
    seeds = [0, 1]
    width = 512
    height = 512

    [rf]
    n_trees = 100
    max_depth = 16
    min_leaf = 5
    features_per_split = 2
    bootstrap = true
    window_radius = 5
    samples_per_scene = 5000
    threshold = 0.5

    [grow]
    connectivity = 8
    seed_disk_radius = 5
    priority = "geodesic"     # or "intensity"
    border_thickness = 4

    [baseline]
    open_radius = 1
    min_peak_dist = 7
    min_area = 20

    [tiling]
    window = 1340
    stride = 1220
    min_weight = 0.01
    workers = 1
    memory_budget_mb = 2048

    [filter]
    threshold = 0.3
    n_rounds = 100
    depth = 3
    shrinkage = 0.1
    interior_thresh = 0.5

    [eval]
    iou_threshold = 0.5

    [paths]                   # defaults for the matching command-line flags
    dataset = "data"

Every key is optional; unknown tables or keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .features_rf import ForestParams
from .instance import BaselineConfig
from .labelsynth import GrowConfig, Priority
from .postfilter import GbtParams
from .synthgen import DENSITY_PRESETS


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class GenSection:
    levels: list[str] = dataclasses.field(default_factory=lambda: ["sparse", "dense", "very-dense"])
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1])
    width: int = 512
    height: int = 512


@dataclasses.dataclass
class RfSection:
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 5
    features_per_split: int = 2
    bootstrap: bool = True
    window_radius: int = 5
    samples_per_scene: int = 5000
    threshold: float = 0.5


@dataclasses.dataclass
class GrowSection:
    connectivity: int = 8
    seed_disk_radius: int = 5
    priority: str = "geodesic"
    border_thickness: int = 4


@dataclasses.dataclass
class BaselineSection:
    open_radius: int = 1
    min_peak_dist: int = 7
    min_area: int = 20


@dataclasses.dataclass
class TilingSection:
    window: int = 1340
    stride: int = 1220
    min_weight: float = 0.01
    workers: int = 1
    memory_budget_mb: int = 2048


@dataclasses.dataclass
class FilterSection:
    threshold: float = 0.3
    n_rounds: int = 100
    depth: int = 3
    shrinkage: float = 0.1
    interior_thresh: float = 0.5


@dataclasses.dataclass
class EvalSection:
    iou_threshold: float = 0.5


PATH_KEYS = (
    "dataset",
    "image",
    "centroids",
    "rf_model",
    "filter_model",
    "samples",
    "pred",
    "pred_dir",
    "gt",
    "out",
)

SECTIONS = {
    "gen": GenSection,
    "rf": RfSection,
    "grow": GrowSection,
    "baseline": BaselineSection,
    "tiling": TilingSection,
    "filter": FilterSection,
    "eval": EvalSection,
}


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    gen: GenSection = dataclasses.field(default_factory=GenSection)
    rf: RfSection = dataclasses.field(default_factory=RfSection)
    grow: GrowSection = dataclasses.field(default_factory=GrowSection)
    baseline: BaselineSection = dataclasses.field(default_factory=BaselineSection)
    tiling: TilingSection = dataclasses.field(default_factory=TilingSection)
    filter: FilterSection = dataclasses.field(default_factory=FilterSection)
    eval: EvalSection = dataclasses.field(default_factory=EvalSection)
    paths: dict[str, str] = dataclasses.field(default_factory=dict)

    # -- derived parameter records --------------------------------------

    def forest_params(self) -> ForestParams:
        r = self.rf
        return ForestParams(
            n_trees=r.n_trees,
            max_depth=r.max_depth,
            min_leaf=r.min_leaf,
            features_per_split=r.features_per_split,
            bootstrap=r.bootstrap,
            seed=self.seed,
        )

    def grow_config(self) -> GrowConfig:
        return GrowConfig(
            connectivity=self.grow.connectivity,
            seed_disk_radius=self.grow.seed_disk_radius,
            priority=Priority(self.grow.priority),
        )

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(
            window_radius=self.rf.window_radius,
            rf_threshold=self.rf.threshold,
            open_radius=self.baseline.open_radius,
            min_peak_dist=self.baseline.min_peak_dist,
            min_area=self.baseline.min_area,
            connectivity=self.grow.connectivity,
            border_thickness=self.grow.border_thickness,
        )

    def gbt_params(self) -> GbtParams:
        f = self.filter
        return GbtParams(n_rounds=f.n_rounds, depth=f.depth, shrinkage=f.shrinkage, seed=self.seed)

    # -- (de)serialisation ----------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; excludes paths."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        try:
            self.forest_params().validate()
            self.grow_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        bad_levels = set(self.gen.levels) - set(DENSITY_PRESETS)
        if bad_levels:
            raise ConfigError(f"unknown density levels {sorted(bad_levels)}")
        t = self.tiling
        if not 1 <= t.stride <= t.window:
            raise ConfigError("tiling.stride must be in [1, window]")
        if not 0 < t.min_weight <= 1:
            raise ConfigError("tiling.min_weight must be in (0, 1]")
        if t.workers < 1:
            raise ConfigError("tiling.workers must be >= 1")
        if self.filter.threshold < 0:
            raise ConfigError("filter.threshold must be >= 0")
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in self.gen.seeds):
            raise ConfigError("gen.seeds must be integers")
        if self.grow.border_thickness < 1:
            raise ConfigError("grow.border_thickness must be >= 1")
        if not 0 <= self.eval.iou_threshold <= 1:
            raise ConfigError("eval.iou_threshold must be in [0, 1]")
        if self.rf.samples_per_scene < 2:
            raise ConfigError("rf.samples_per_scene must be >= 2")


def _coerce(section: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    default = cls()
    values = {}
    for key, value in raw.items():
        expected = type(getattr(default, key))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"[{section}] {key}: expected {expected.__name__}, got {type(value).__name__}")
        values[key] = value
    return dataclasses.replace(default, **values)


def config_from_dict(raw: dict) -> PipelineConfig:
    known = set(SECTIONS) | {"seed", "paths"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    cfg = PipelineConfig()
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        cfg.seed = raw["seed"]
    for name, cls in SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _coerce(name, cls, raw[name]))
    paths = raw.get("paths", {})
    bad = set(paths) - set(PATH_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) in [paths]: {', '.join(sorted(bad))}")
    cfg.paths = {k: str(v) for k, v in paths.items()}
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, Any]) -> PipelineConfig:
    """Apply ``{"section.key": value}`` overrides (``None`` values are skipped)."""
    raw = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            raw.setdefault(section, {})[key] = value
        else:
            raw[dotted] = value
    return config_from_dict(raw)


def dump_toml(cfg: PipelineConfig) -> str:
    """Serialise to the TOML subset accepted by :func:`load_config`."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    d = cfg.to_dict()
    lines = [f"seed = {d.pop('seed')}"]
    for section, values in d.items():
        lines.append(f"\n[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def write_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_toml(cfg))
