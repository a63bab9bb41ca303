"""Run configuration: defaults, key=value config files, and CLI/env overrides.

Precedence (highest first): CLI flag > FEWSEG_DATA_ROOT env var (data_root
only) > config file > built-in default.  ``epochs`` left unset resolves per
dataset: 50 for pascal, 20 for coco and synthetic.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

ENV_DATA_ROOT = "FEWSEG_DATA_ROOT"
EPOCH_DEFAULTS = {"pascal": 50, "coco": 20, "synthetic": 20}


@dataclass
class RunConfig:
    """Everything a run needs; every field maps to a CLI flag and a config key."""

    backbone: str = "resnet50"
    weights: str | None = None  # state-dict path, or an int-like string for seeded init
    dataset: str = "pascal"
    data_root: str | None = None
    fold: int = 0
    k: int = 1
    batch_size: int = 8
    lr: float = 0.001
    epochs: int | None = None
    alpha: float = 0.1
    drop_rate: float = 0.05
    bi_transformer: bool = True
    seed: int = 0
    image_size: int = 400
    width: int = 20
    episodes_per_epoch: int = 1000
    val_episodes: int = 100
    val_interval: int = 1
    fixed_episodes: int = 0  # > 0: pre-sample this many episodes and cycle (overfit mode)
    synth_classes: int = 3
    synth_images_per_class: int = 10
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.dataset not in EPOCH_DEFAULTS:
            raise ValueError(f"unknown dataset {self.dataset!r}, expected one of {sorted(EPOCH_DEFAULTS)}")
        if self.epochs is None:
            self.epochs = EPOCH_DEFAULTS[self.dataset]
        if self.dataset in ("pascal", "coco") and self.fold not in (0, 1, 2, 3):
            raise ValueError(f"fold must be in 0..3, got {self.fold}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop rate must be in [0, 1), got {self.drop_rate}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.image_size % 16:
            # levels 2 and 3 need exact /8 and /16 grids, and the level-2 grid
            # must be even for 2x support pooling
            raise ValueError(f"image size must be divisible by 16, got {self.image_size}")

    def resolved_weights(self) -> str | int | None:
        """Interpret an all-digit weights value as a seed, otherwise as a path."""
        if isinstance(self.weights, str) and self.weights.lstrip("-").isdigit():
            return int(self.weights)
        return self.weights

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


def parse_config_file(path: str) -> dict[str, str]:
    """Read a line-oriented key=value file; '#' starts a comment."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _coerce(name: str, value, target_type) -> object:
    if value is None or not isinstance(value, str):
        return value
    if target_type is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def build_config(
    file_values: dict | None = None,
    cli_values: dict | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Merge config sources into a RunConfig, validating keys and types."""
    env = os.environ if env is None else env
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    env_values = {"data_root": env[ENV_DATA_ROOT]} if env.get(ENV_DATA_ROOT) else {}
    merged: dict[str, object] = {}
    for source in (file_values or {}, env_values, cli_values or {}):
        for key, value in source.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    basic = {"int": int, "float": float, "bool": bool, "str": str}
    kwargs = {}
    for name, value in merged.items():
        # field annotations are strings ("int | None", "bool", ...); the first
        # token names the base type used for coercing file/CLI strings
        base = basic.get(str(fields[name].type).split(" ")[0], str)
        kwargs[name] = _coerce(name, value, base)
    return RunConfig(**kwargs)
