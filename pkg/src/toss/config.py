"""Pipeline configuration: nested YAML mapped onto the component dataclasses.

Angles are written in degrees in the file (``<name>_deg`` keys) and held in
radians inside the package. Unknown keys are rejected with their full path.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .ds_voting import VoteConfig
from .segmentation import ClusterParams, GroundParams, ProjectionConfig
from .tracking.kalman import NoiseConfig
from .tracking.tracker import TrackerConfig

DEFAULT_CONFIG = Path(__file__).with_name("data") / "default.yaml"

REFINE_MODES = ("online", "offline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    enabled: bool = True
    mode: str = "online"
    cold_start_static: bool = True
    vote: VoteConfig = field(default_factory=VoteConfig)

    def __post_init__(self):
        if self.mode not in REFINE_MODES:
            raise ValueError(f"refinement mode must be one of {REFINE_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class PipelineConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    ground: GroundParams = field(default_factory=GroundParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    tracking: TrackerConfig = field(default_factory=TrackerConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    voxel_size: float = 0.2
    prefetch: int = 8
    movable_classes: str | None = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.prefetch < 0:
            raise ValueError("prefetch must be >= 0")

    def with_overrides(self, associator: str | None = None, refine: bool | None = None) -> PipelineConfig:
        cfg = self
        if associator is not None:
            cfg = dataclasses.replace(cfg, tracking=dataclasses.replace(cfg.tracking, associator=associator))
        if refine is not None:
            cfg = dataclasses.replace(cfg, refine=dataclasses.replace(cfg.refine, enabled=refine))
        return cfg


# per section: dataclass, radian fields exposed as "<name>_deg"
_ANGLES = {
    ProjectionConfig: ("f_up", "f_down"),
    GroundParams: ("max_slope",),
}


def _build(cls, doc: Any, where: str, nested: dict[str, tuple[type, str]] | None = None):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    angles = _ANGLES.get(cls, ())
    nested = nested or {}
    kwargs = {}
    for key, val in doc.items():
        path = f"{where}.{key}" if where else str(key)
        if key in nested:
            sub_cls, sub_field = nested[key]
            kwargs[sub_field] = _build(sub_cls, val, path)
        elif key.endswith("_deg") and key[:-4] in angles:
            kwargs[key[:-4]] = math.radians(_number(val, path))
        elif key in names and key not in angles:
            kwargs[key] = val
        else:
            raise ConfigError(f"unknown config key {path!r}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _number(val, path) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    return float(val)


def _refine(doc: Any) -> RefineConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("ds_voting: expected a mapping")
    own = {k: doc[k] for k in ("enabled", "mode", "cold_start_static") if k in doc}
    vote_doc = {k: v for k, v in doc.items() if k not in own}
    vote = _build(VoteConfig, vote_doc, "ds_voting")
    try:
        return RefineConfig(vote=vote, **own)
    except ValueError as exc:
        raise ConfigError(f"ds_voting: {exc}") from None


def config_from_dict(doc: dict | None) -> PipelineConfig:
    doc = dict(doc or {})
    known = {"projection", "ground", "cluster", "tracking", "ds_voting", "map", "io"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    tracking = _build(TrackerConfig, doc.get("tracking"), "tracking", {"noise": (NoiseConfig, "noise")})
    map_doc = doc.get("map") or {}
    io_doc = doc.get("io") or {}
    for section, d, allowed in (("map", map_doc, {"voxel_size"}), ("io", io_doc, {"prefetch", "movable_classes"})):
        if not isinstance(d, dict):
            raise ConfigError(f"{section}: expected a mapping")
        for key in d:
            if key not in allowed:
                raise ConfigError(f"unknown config key '{section}.{key}'")
    try:
        return PipelineConfig(
            projection=_build(ProjectionConfig, doc.get("projection"), "projection"),
            ground=_build(GroundParams, doc.get("ground"), "ground"),
            cluster=_build(ClusterParams, doc.get("cluster"), "cluster"),
            tracking=tracking,
            refine=_refine(doc.get("ds_voting")),
            voxel_size=float(map_doc.get("voxel_size", 0.2)),
            prefetch=int(io_doc.get("prefetch", 8)),
            movable_classes=io_doc.get("movable_classes"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path=None) -> PipelineConfig:
    path = DEFAULT_CONFIG if path is None else Path(path)
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return config_from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
