"""Run configuration: nested dataclasses <-> YAML.

Loading is strict. Unknown keys, wrong types and failed invariants raise
ConfigError naming the offending field, e.g. ``ppo.minibatch_size``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .mdp import EnvConfig
from .ppo import PpoConfig
from .terrain import TERRAIN_TYPES

VARIANTS = ("cpg_rl", "rl_baseline")
REWARDS = ("reward1", "reward2")
TRAIN_TERRAINS = ("flat",) + TERRAIN_TYPES + ("curriculum",)


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_episodes: int = 20
    levels: int = 5                 # difficulty levels 0, 1/(levels-1), ..., 1
    terrains: tuple = TERRAIN_TYPES
    spawn_spacing: float = 0.0      # 0: all episodes start at the terrain centre

    def __post_init__(self):
        self.terrains = tuple(self.terrains)
        if self.n_episodes < 1 or self.levels < 2:
            raise ValueError("need n_episodes >= 1 and levels >= 2")
        bad = set(self.terrains) - {"flat", *TERRAIN_TYPES}
        if bad:
            raise ValueError(f"unknown eval terrains {sorted(bad)}")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    morphology: str = None          # optional YAML with leg geometry, body mass properties and PD gains
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.env.variant not in VARIANTS:
            raise ConfigError(f"env.variant: must be one of {VARIANTS}, got {self.env.variant!r}")
        if self.env.terrain not in TRAIN_TERRAINS:
            raise ConfigError(f"env.terrain: must be one of {TRAIN_TERRAINS}, got {self.env.terrain!r}")
        if not 0.0 <= self.env.difficulty <= 1.0:
            raise ConfigError("env.difficulty: must lie in [0, 1]")
        if self.env.decimation < 1 or self.env.episode_length_s <= 0:
            raise ConfigError("env: need decimation >= 1 and episode_length_s > 0")
        if self.env.backend not in ("numpy", "numba"):
            raise ConfigError("env.backend: must be 'numpy' or 'numba'")

    def env_config(self) -> EnvConfig:
        """Environment config for training: seed and env count taken from the run."""
        return dataclasses.replace(self.env, seed=self.seed, n_envs=self.ppo.n_envs)


# -- dict conversion -------------------------------------------------------------
def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, np.ndarray):
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a numeric array") from None
        if arr.shape != default.shape:
            raise ConfigError(f"{path}: expected shape {default.shape}, got {arr.shape}")
        return arr
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        out = dict(default)
        for k, v in value.items():
            if k not in default:
                raise ConfigError(f"{path}.{k}: unknown key")
            out[k] = _coerce(v, default[k], f"{path}.{k}")
        return out
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a (possibly partial) nested mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{_join(path, k)}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = getattr(defaults, f.name)
        if f.name not in data:
            kwargs[f.name] = default
        elif dataclasses.is_dataclass(default):
            kwargs[f.name] = from_dict(type(default), data[f.name], _join(path, f.name))
        else:
            kwargs[f.name] = _coerce(data[f.name], default, _join(path, f.name))
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def _join(path, name):
    return f"{path}.{name}" if path else name


# -- files -----------------------------------------------------------------------
def load_config(path=None, overrides: dict = None) -> RunConfig:
    """Read a YAML run config (or defaults when ``path`` is None), apply dotted
    ``overrides`` such as ``{"env.variant": "rl_baseline"}`` and the morphology file."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    morph = data.get("morphology")
    if morph:
        mpath = Path(morph)
        if not mpath.is_absolute() and path is not None and not mpath.exists():
            mpath = Path(path).parent / mpath
        data = _apply_morphology(data, mpath)
    return from_dict(RunConfig, data)


MORPHOLOGY_KEYS = {"geometry": ("env", "geometry"), "body": ("env", "sim"), "gains": ("env", "gains")}
BODY_FIELDS = ("mass", "inertia", "base_half_extents")


def _apply_morphology(data, mpath: Path) -> dict:
    """Morphology YAML: ``geometry:`` (LegGeometry fields), ``body:`` (mass,
    inertia, base_half_extents) and ``gains:`` (PdGains fields). Values in the
    run config itself take precedence."""
    if not mpath.exists():
        raise ConfigError(f"morphology: file not found: {mpath}")
    try:
        morph = yaml.safe_load(mpath.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"morphology: invalid YAML: {e}") from None
    unknown = set(morph) - set(MORPHOLOGY_KEYS)
    if unknown:
        raise ConfigError(f"morphology: unknown sections {sorted(unknown)}")
    bad = set(morph.get("body", {})) - set(BODY_FIELDS)
    if bad:
        raise ConfigError(f"morphology.body: unknown fields {sorted(bad)}")
    data = dict(data)
    env = dict(data.get("env") or {})
    for section, (_, target) in MORPHOLOGY_KEYS.items():
        if section in morph:
            env[target] = {**(morph[section] or {}), **(env.get(target) or {})}
    data["env"] = env
    return data


def save_config(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None, width=120)
