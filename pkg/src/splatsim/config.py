"""Simulator config file: strict YAML with one section per subsystem.

Sections: assets, poses, track, vehicle, scenario, ppo, render. Every key is
validated against the target dataclass; unknown keys are rejected with the
full path to the offending key (plus a suggestion when one is close).
"""

from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .env import DrivingEnv, PoseSource, RenderSettings, ScenarioConfig
from .errors import ConfigError
from .physics import FrictionConfig, VehicleConfig, WheelConfig
from .rl import PpoConfig
from .track import TrackConfig


@dataclass(frozen=True)
class AssetPaths:
    environment: str = ""
    ego: str = ""
    agent: str = ""


@dataclass(frozen=True)
class SimulatorConfig:
    assets: AssetPaths = field(default_factory=AssetPaths)
    poses: PoseSource = field(default_factory=lambda: PoseSource(path=""))
    track: TrackConfig = field(default_factory=TrackConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    render: RenderSettings = field(default_factory=RenderSettings)

    def make_env(self) -> DrivingEnv:
        return DrivingEnv(
            self.scenario,
            self.poses,
            track_config=self.track,
            vehicle=self.vehicle,
            render_settings=self.render,
        )


def _coerce(value, target_type, path: str):
    """Best-effort scalar/tuple coercion with a config-path error message."""
    import typing

    origin = typing.get_origin(target_type)
    if target_type in (float, int, str, bool):
        if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if target_type is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected integer, got {value!r}")
            return value
        if target_type is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected boolean, got {value!r}")
            return value
        if target_type is str:
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected string, got {value!r}")
            return value
        raise ConfigError(f"{path}: expected {target_type.__name__}, got {value!r}")
    if target_type is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if origin is not None and origin is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    return value


def _build_dataclass(cls, data: dict, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in fields:
            hint = difflib.get_close_matches(key, fields.keys(), n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown config key: {here}{suffix}")
        ftype = fields[key].type
        if isinstance(ftype, str):
            ftype = _resolve_type(cls, ftype)
        if isinstance(ftype, type) and dataclasses.is_dataclass(ftype):
            kwargs[key] = _build_dataclass(ftype, value, here)
        else:
            kwargs[key] = _coerce(value, ftype, here)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}")


def _resolve_type(cls, annotation: str):
    import sys
    import typing

    module = sys.modules[cls.__module__]
    namespace = {**vars(typing), **vars(module), "tuple": tuple}
    try:
        return eval(annotation, namespace)  # annotations are our own literals
    except Exception:
        return None


_SECTION_TYPES = {
    "assets": AssetPaths,
    "poses": PoseSource,
    "track": TrackConfig,
    "vehicle": VehicleConfig,
    "scenario": ScenarioConfig,
    "ppo": PpoConfig,
    "render": RenderSettings,
}


def load_config(path) -> SimulatorConfig:
    """Parse and validate a simulator config file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}")
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping of sections")

    sections = {}
    for key, value in doc.items():
        if key not in _SECTION_TYPES:
            hint = difflib.get_close_matches(key, _SECTION_TYPES.keys(), n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown config section: {key}{suffix}")
        sections[key] = _build_dataclass(_SECTION_TYPES[key], value, key)

    cfg = SimulatorConfig(**sections)
    # asset paths live in the assets section but the scenario consumes them
    scenario = cfg.scenario
    updates = {}
    if cfg.assets.environment and not scenario.env_asset:
        updates["env_asset"] = cfg.assets.environment
    if cfg.assets.ego and not scenario.ego_asset:
        updates["ego_asset"] = cfg.assets.ego
    if cfg.assets.agent and not scenario.agent_asset:
        updates["agent_asset"] = cfg.assets.agent
    if updates:
        cfg = dataclasses.replace(cfg, scenario=dataclasses.replace(scenario, **updates))
    return cfg


def dump_default_config(path, overrides: dict = None) -> None:
    """Write a fully populated config with defaults (plus shallow overrides)."""
    cfg = SimulatorConfig()
    doc = {
        "assets": dataclasses.asdict(cfg.assets),
        "poses": dataclasses.asdict(cfg.poses),
        "track": dataclasses.asdict(cfg.track),
        "vehicle": dataclasses.asdict(cfg.vehicle),
        "scenario": dataclasses.asdict(cfg.scenario),
        "ppo": dataclasses.asdict(cfg.ppo),
        "render": dataclasses.asdict(cfg.render),
    }
    for section, values in (overrides or {}).items():
        doc.setdefault(section, {}).update(values)
    for section in doc.values():
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
    with open(str(path), "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
