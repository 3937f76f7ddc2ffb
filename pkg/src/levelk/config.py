"""Line-based ``key = value`` run configuration with sections.

Sections mirror the dataclasses they configure::

    [sim]        SimConfig
    [scene]      InitialSceneParams (ranges written as "lo, hi")
    [road]       RoadGeometry
    [reward]     RewardWeights
    [train]      TrainConfig for every level
    [train:K]    overrides for level K only
    [curriculum] max_level, seed

Unknown sections or keys are errors. Overriding a constant that the method
fixes emits a :class:`ConstantOverrideWarning`.
"""
from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass, field, fields, replace

from .curriculum import CurriculumConfig
from .sim import InitialSceneParams, RewardWeights, SimConfig
from .traffic import RoadGeometry
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


class ConstantOverrideWarning(UserWarning):
    pass


SECTIONS = {
    "sim": SimConfig,
    "scene": InitialSceneParams,
    "road": RoadGeometry,
    "reward": RewardWeights,
    "train": TrainConfig,
}

# Values taken from the method description; overriding them is allowed but flagged.
FIXED = {
    "sim": {"dt", "decision_period", "max_episode_time", "success_dwell", "steering_rate_max",
            "steering_angle_max", "lateral_speed_floor"},
    "scene": {"v0", "t0", "phi0", "n_cars", "gap"},
    "reward": {"collision", "speed", "top_lane", "pass_blockage"},
}


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    scene: InitialSceneParams = field(default_factory=InitialSceneParams)
    road: RoadGeometry = field(default_factory=RoadGeometry)
    reward: RewardWeights = field(default_factory=RewardWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    per_level: dict = field(default_factory=dict)
    max_level: int = 5
    seed: int = 0

    def curriculum(self) -> CurriculumConfig:
        return CurriculumConfig(max_level=self.max_level, train=self.train, per_level=dict(self.per_level),
                                seed=self.seed, sim=self.sim, scene=self.scene, road=self.road,
                                reward=self.reward)


def _parse_value(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != len(default):
                raise ValueError(text)
            return tuple(type(d)(float(p)) if isinstance(d, int) and float(p).is_integer() else type(d)(p)
                         for d, p in zip(default, parts))
        if isinstance(default, int):
            value = float(text)
            if not value.is_integer():
                raise ValueError(text)
            return int(value)
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def _build(cls, section: str, items, base=None):
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    changes = {}
    for key, text in items:
        where = f"[{section}] {key}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        default = getattr(base, key)
        value = _parse_value(text, default, where)
        if key in FIXED.get(section.split(":")[0], ()) and value != default:
            warnings.warn(f"{where} overrides the method's value {default!r} with {value!r}",
                          ConstantOverrideWarning, stacklevel=3)
        changes[key] = value
    try:
        return replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=(";",))
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    if parser.defaults():
        raise ConfigError(f"[DEFAULT]: unknown keys {sorted(parser.defaults())}")
    cfg = RunConfig()
    for section in parser.sections():
        items = list(parser.items(section, raw=True))
        if section in SECTIONS:
            setattr(cfg, section, _build(SECTIONS[section], section, items))
        elif section.startswith("train:"):
            try:
                level = int(section.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"[{section}]: level must be an integer") from None
            if level < 1:
                raise ConfigError(f"[{section}]: level must be at least 1")
            cfg.per_level[level] = items  # resolved against [train] below
        elif section == "curriculum":
            for key, text in items:
                if key == "max_level":
                    cfg.max_level = _parse_value(text, 0, f"[curriculum] {key}")
                elif key == "seed":
                    cfg.seed = _parse_value(text, 0, f"[curriculum] {key}")
                else:
                    raise ConfigError(f"[curriculum] {key}: unknown key")
        else:
            raise ConfigError(f"[{section}]: unknown section")
    cfg.per_level = {k: _build(TrainConfig, f"train:{k}", items, cfg.train)
                     for k, items in sorted(cfg.per_level.items())}
    if cfg.max_level < 1:
        raise ConfigError("[curriculum] max_level: must be at least 1")
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def serialize_config(cfg: RunConfig) -> str:
    """Full configuration text; ``parse_config(serialize_config(c)) == c``."""
    lines = []
    for section, cls in SECTIONS.items():
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        lines += [f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(cls)]
        lines.append("")
    for level, tcfg in sorted(cfg.per_level.items()):
        diff = [f for f in fields(TrainConfig) if getattr(tcfg, f.name) != getattr(cfg.train, f.name)]
        lines.append(f"[train:{level}]")
        lines += [f"{f.name} = {_format_value(getattr(tcfg, f.name))}" for f in diff]
        lines.append("")
    lines += ["[curriculum]", f"max_level = {cfg.max_level}", f"seed = {cfg.seed}", ""]
    return "\n".join(lines)
