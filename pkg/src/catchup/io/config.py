"""Strict JSON run configuration: TrainConfig fields plus dataset and output keys."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from ..trainer import ConfigError, TrainConfig
from .datasets import DATASETS


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "two_moons"
    n_data: int = 20000
    data_seed: int = 100
    dataset_path: Optional[str] = None
    output_dir: str = "runs/default"

    RUN_KEYS = ("dataset", "n_data", "data_seed", "dataset_path", "output_dir")

    def to_dict(self) -> dict[str, Any]:
        out = self.train.to_dict()
        out.update({k: getattr(self, k) for k in self.RUN_KEYS})
        return out


NULLABLE = ("c_skip", "dataset_path")


def allowed_keys() -> list[str]:
    return TrainConfig.field_names() + list(RunConfig.RUN_KEYS)


def _coerce(name: str, value, default):
    # type checks follow the default's type; None-able fields accept null
    if value is None:
        if name not in NULLABLE:
            raise ConfigError(f"{name}: null is not allowed here")
        return value
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def from_dict(doc: dict[str, Any]) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(allowed_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    base = RunConfig()
    train_kw = {}
    for f in fields(TrainConfig):
        if f.name in doc:
            train_kw[f.name] = _coerce(f.name, doc[f.name], getattr(base.train, f.name))
    run_kw = {k: _coerce(k, doc[k], getattr(base, k)) for k in RunConfig.RUN_KEYS if k in doc}
    cfg = RunConfig(train=TrainConfig(**train_kw), **run_kw)
    cfg.train.validate()
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}, got {cfg.dataset!r}")
    if cfg.n_data < 1:
        raise ConfigError("n_data must be at least 1")
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)
