"""JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .constraints import ConstraintWeights, Schedule
from .field import EncodingConfig, FieldConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    n_train: int = 8
    train_indices: list[int] | None = None
    background: list[float] = dataclasses.field(default_factory=lambda: [1.0, 1.0, 1.0])
    bounds: list[list[float]] | None = None
    depth_priors: str | None = "depth_train"


_SECTIONS = {
    "train": TrainConfig,
    "field": FieldConfig,
    "encoding": EncodingConfig,
    "weights": ConstraintWeights,
    "schedule": Schedule,
    "dataset": DatasetConfig,
}
_NESTED_TRAIN = ("weights", "schedule", "field", "encoding")
_TOP_LEVEL = {"data", "output", *_SECTIONS}


def _check_type(where: str, value: Any, default: Any) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})")


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _build(section: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    skip = _NESTED_TRAIN if cls is TrainConfig else ()
    defaults = {k: v for k, v in _defaults(cls).items() if k not in skip}
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}; allowed: {sorted(defaults)}")
    for key, value in data.items():
        _check_type(f"{section}.{key}", value, defaults[key])
    return data


@dataclass
class RunConfig:
    train: TrainConfig
    dataset: DatasetConfig
    data: str | None = None
    output: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = sorted(set(doc) - _TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}; allowed: {sorted(_TOP_LEVEL)}")
        parts = {name: _build(name, sec_cls, doc.get(name, {})) for name, sec_cls in _SECTIONS.items()}
        try:
            nested = {name: _SECTIONS[name](**parts[name]) for name in _NESTED_TRAIN}
            train = TrainConfig(**parts["train"], **nested)
            dataset = DatasetConfig(**parts["dataset"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("data", "output"):
            if doc.get(key) is not None and not isinstance(doc[key], str):
                raise ConfigError(f"{key}: expected a path string")
        return cls(train=train, dataset=dataset, data=doc.get("data"), output=doc.get("output"))

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        doc = {name: train.pop(name) for name in _NESTED_TRAIN}
        doc["train"] = train
        doc["dataset"] = dataclasses.asdict(self.dataset)
        doc["data"] = self.data
        doc["output"] = self.output
        return doc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(doc)


def default_config_dict() -> dict:
    return RunConfig(train=TrainConfig(), dataset=DatasetConfig()).to_dict()
