"""Experiment configuration: one JSON file, one dataclass per section.

Example::

    {
      "preset": "normal",
      "scenario": {"lane_count": 3, "hdv_count": 4, "hdv_count_max": 5},
      "risk": {"xi_x": 10.0},
      "ppo": {"rollout_horizon": 256},
      "train": {"iterations": 50}
    }

Sections missing from the file keep their defaults (or the preset's values).
Unknown keys and invalid values raise :class:`ConfigError` naming the field
path, e.g. ``scenario.lane_count``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .nn import NetworkConfig
from .ppo import PPOConfig
from .reward import RewardConfig
from .risk import GridSpec, RiskParams
from .safety import SafetyConfig
from .sim import ScenarioConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SafetySection:
    r_safe: float = 2.5
    sample_count: int = 20
    min_keep_gap: float = 10.0
    profile: str = "smoothstep"
    hdv_scope: str = "selected"


@dataclass(frozen=True)
class RewardSection:
    w_safety: float = 10.0
    w_stability: float = 0.5
    w_efficiency: float = 1.0
    r_const: float = 0.1
    ema_keep: float = 0.99
    gamma_b_min: float = 0.2
    gamma_b_max: float = 0.9
    risk_to_gamma_scale: float = 0.2
    history: str = "ema"


@dataclass(frozen=True)
class NetworkSection:
    conv1_out: int = 8
    conv2_out: int = 16
    kernel: int = 3
    mlp_hidden: int = 8
    rnn_hidden: int = 32
    spatial_mid: int = 4
    head_hidden: int = 32
    critic_uses_policy: bool = True


@dataclass(frozen=True)
class TrainSection:
    iterations: int = 100
    checkpoint_every: int = 25
    eval_episodes: int = 20

    def __post_init__(self):
        if self.iterations < 1 or self.checkpoint_every < 1 or self.eval_episodes < 1:
            raise ValueError("iterations, checkpoint_every and eval_episodes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    risk: RiskParams = field(default_factory=RiskParams)
    grid: GridSpec = field(default_factory=GridSpec)
    safety: SafetySection = field(default_factory=SafetySection)
    reward: RewardSection = field(default_factory=RewardSection)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)

    # ---- derived runtime configs

    def safety_config(self) -> SafetyConfig:
        s = self.safety
        return SafetyConfig(
            r_safe=s.r_safe, sample_count=s.sample_count, min_keep_gap=s.min_keep_gap, profile=s.profile,
            hdv_scope=s.hdv_scope, lane_width=self.scenario.lane_width,
            lane_change_duration=self.scenario.lane_change_duration, risk_params=self.risk,
        )

    def reward_config(self) -> RewardConfig:
        return RewardConfig(max_speed=self.scenario.max_speed, **dataclasses.asdict(self.reward))

    def network_config(self, attention: bool = True) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            in_channels=3, height=self.grid.height_cells, width=self.grid.width_cells,
            conv1=(3, n.conv1_out, n.kernel), conv2=(n.conv1_out, n.conv2_out, n.kernel),
            mlp_hidden=n.mlp_hidden, rnn_hidden=n.rnn_hidden, spatial_mid=n.spatial_mid,
            head_hidden=n.head_hidden, attention=attention,
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- presets

PRESETS: dict[str, dict] = {
    "normal": {"scenario": {"hdv_count": 4, "hdv_count_max": 5}},
    "dense": {"scenario": {"hdv_count": 5, "hdv_count_max": 6}},
    # desk-scale learning runs: two lanes, two HDVs, small raster and network
    "reduced": {
        "scenario": {"lane_count": 2, "hdv_count": 2, "road_length": 600.0, "max_steps": 200},
        "grid": {"width_cells": 16, "height_cells": 8, "cell_size": 3.0, "origin": [-18.0, -12.0]},
        "network": {"conv1_out": 4, "conv2_out": 8, "mlp_hidden": 4, "rnn_hidden": 8,
                    "spatial_mid": 2, "head_hidden": 16},
        "ppo": {"rollout_horizon": 128, "minibatch_size": 64, "seq_len": 16},
        "train": {"iterations": 150, "checkpoint_every": 50, "eval_episodes": 10},
    },
}


# ---------------------------------------------------------------- loading


def _convert(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(_convert(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def build(cls, data: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from ``data``, reporting errors by field path."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{sub}: unknown field")
        kwargs[key] = _convert(value, hints[key], sub)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        data = _merge(PRESETS[preset], data)
    return build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def load_scenario_config(path) -> ScenarioConfig:
    """Read a ScenarioConfig from a bare JSON object or the ``scenario`` section of a config."""
    data = json.loads(Path(path).read_text())
    if "scenario" in data:
        return load_config(path).scenario
    return build(ScenarioConfig, data, "scenario")


def preset(name: str, **sections) -> ExperimentConfig:
    """Preset with per-section overrides, e.g. ``preset("reduced", train={"iterations": 5})``."""
    return config_from_dict({"preset": name, **sections})


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, scenario=replace(cfg.scenario, seed=seed))
