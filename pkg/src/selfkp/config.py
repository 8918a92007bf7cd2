"""Training configuration tree and its YAML round-trip."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import NoiseConfig
from .evaluation import EvalConfig
from .geometry import BlurConfig, HomographyConfig
from .keypoints import ExtractionConfig
from .losses import LossWeights
from .model import BACKBONE


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the first offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ModelConfig:
    backbone: tuple = BACKBONE
    head_width: int = 256
    descriptor_dim: int = 256


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    crop_size: int = 256
    epochs_constant: int = 8
    epochs_decay: int = 10
    decay_factor: float = 0.75
    # None: one pass over the training images per epoch
    steps_per_epoch: int | None = None
    theta_dist: float = 4.0
    n_random: int = 2
    # restrict the ground-truth descriptor term to consistency-accepted pairs
    gt_accepted_only: bool = False
    val_fraction: float = 0.02
    seed: int = 0
    dtype: str = "float32"
    weights: LossWeights = field(default_factory=LossWeights)
    homography: HomographyConfig = field(default_factory=HomographyConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    blur: BlurConfig = field(default_factory=BlurConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    validation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        for key in ("learning_rate", "decay_factor", "batch_size", "crop_size"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be nonnegative")
        if self.crop_size % 8:
            raise ConfigError("crop_size", "must be divisible by 8")
        if self.epochs_constant < 0 or self.epochs_decay < 0 or self.epochs_constant + self.epochs_decay == 0:
            raise ConfigError("epochs_constant", "need at least one epoch")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch", "must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction", "must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be float32 or float64")
        if self.n_random < 0:
            raise ConfigError("n_random", "must be nonnegative")

    @property
    def epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(key, tp, value):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(key, "may not be null")
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, inner[0], value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        elem = args[0] if args else None
        if elem in (float, int):
            return tuple(_coerce(key, elem, v) for v in value)
        return tuple(value)
    return value


def from_dict(cls, data: dict | None, prefix: str = ""):
    """Build ``cls`` from a nested dict, rejecting unknown keys by dotted name."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(prefix + str(k), "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        key = prefix + f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = from_dict(tp, data[f.name], key + ".")
        else:
            kwargs[f.name] = _coerce(key, tp, data[f.name])
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if prefix and not exc.key.startswith(prefix):
            raise ConfigError(prefix + exc.key, str(exc).split(": ", 1)[1]) from None
        raise
    except ValueError as exc:
        raise ConfigError(prefix.rstrip(".") or cls.__name__, str(exc)) from None


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return from_dict(TrainConfig, data)


def dump_config(cfg, path=None) -> str:
    text = yaml.safe_dump(to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def describe_defaults(cfg=None, prefix: str = "") -> list[str]:
    """``dotted.key = default`` lines for every configuration entry."""
    cfg = TrainConfig() if cfg is None else cfg
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines += describe_defaults(v, prefix + f.name + ".")
        else:
            lines.append(f"{prefix}{f.name} = {list(v) if isinstance(v, tuple) else v}")
    return lines
