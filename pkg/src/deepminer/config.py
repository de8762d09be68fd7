"""``key = value`` run configuration files.

Lines starting with ``#`` (and trailing ``# ...`` comments) are ignored.
Keys are the ``TrainConfig`` fields plus the ``ModelConfig`` fields, flat.
Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigInvalid
from .model import ModelConfig
from .training import TrainConfig

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def _convert(field: dataclasses.Field, raw: str):
    name = field.name
    default = field.default
    if name == "decay_epochs":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if name in ("checkpoint", "test_data"):
        return raw or None
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str) -> TrainConfig:
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"}
    train_kwargs, model_items = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigInvalid(f"line {lineno}: expected 'key = value'")
        if key in train_fields:
            try:
                train_kwargs[key] = _convert(train_fields[key], value)
            except ValueError as exc:
                raise ConfigInvalid(f"line {lineno}: {key}: {exc}") from None
        elif key in _MODEL_KEYS:
            model_items[key] = value
        else:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
    cfg = TrainConfig(model=ModelConfig.from_items(model_items), **train_kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        if f.name == "model":
            continue
        value = getattr(cfg, f.name)
        if f.name == "decay_epochs":
            value = ",".join(map(str, value))
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif value is None:
            value = ""
        lines.append(f"{f.name} = {value}")
    lines += [f"{k} = {v}" for k, v in cfg.model.to_items()]
    return "\n".join(lines) + "\n"
