"""Run configuration: dataclass tree, config files, dotted-key overrides.

Config files are JSON or TOML whose structure mirrors the dataclass tree;
overrides use dotted paths (``deformation.epochs=5``) and are coerced to the
type of the value they replace.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import PreprocessConfig
from .deformation import DeformNetConfig
from .diffusion import DenoiserConfig, GuidanceConfig
from .losses import LossWeights
from .synthetic import PhantomSpec


@dataclass
class ScheduleConfig:
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class DiffusionTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    iterations: int = 200_000
    positive_upsample: float = 10.0
    augment_degrees: float = 15.0
    log_every: int = 100
    checkpoint_every: int = 50_000


@dataclass
class DeformTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    use_representation: bool = True
    unlabeled_fraction: float = 1.0
    repr_t_inference: int = 600
    augment_degrees: float = 15.0
    infer_batch: int = 8
    grad_clip: float = 10.0


@dataclass
class TrainConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    deform_net: DeformNetConfig = field(default_factory=DeformNetConfig)
    diffusion: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    deformation: DeformTrainConfig = field(default_factory=DeformTrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)


@dataclass
class GenConfig:
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 20
    seed: int = 0


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(value, template, path: str):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ValueError(f"{path}: cannot interpret {value!r} as bool")
    if isinstance(template, int):
        if isinstance(value, float):
            if value != int(value):
                raise ValueError(f"{path}: expected integer, got {value!r}")
            return int(value)
        if isinstance(value, int):
            return value
        try:
            return int(str(value))
        except ValueError:
            raise ValueError(f"{path}: expected integer, got {value!r}") from None
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{path}: expected a list, got {value!r}")
        elem = template[0] if template else 0.0
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    if isinstance(template, str):
        return str(value)
    return value


def update_config(cfg, data: dict, path: str = "") -> None:
    """Apply a nested dict onto a dataclass tree in place, coercing types."""
    for key, value in data.items():
        where = f"{path}{key}"
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {where!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ValueError(f"{where}: expected a table, got {value!r}")
            update_config(current, value, f"{where}.")
        else:
            setattr(cfg, key, _coerce(value, current, where))


def apply_overrides(cfg, overrides: list[str]) -> None:
    """Apply ``a.b.c=value`` strings onto a dataclass tree in place."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} must look like key=value")
        obj = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not hasattr(obj, part) or not dataclasses.is_dataclass(getattr(obj, part)):
                raise ValueError(f"unknown config section {part!r} in {item!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not hasattr(obj, leaf):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(obj, leaf)
        if dataclasses.is_dataclass(current):
            raise ValueError(f"{key!r} is a section, not a value")
        setattr(obj, leaf, _coerce(raw, current, key))


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    raise ValueError(f"config file must be .json or .toml, got {path.name!r}")


def load_train_config(path: str | Path | None, overrides: list[str] | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        update_config(cfg, load_config_file(path))
    apply_overrides(cfg, overrides or [])
    return cfg


def load_gen_config(path: str | Path | None, overrides: list[str] | None = None) -> GenConfig:
    cfg = GenConfig()
    if path is not None:
        update_config(cfg, load_config_file(path))
    apply_overrides(cfg, overrides or [])
    return cfg
