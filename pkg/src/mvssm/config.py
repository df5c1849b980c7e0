"""Flat JSON run configuration covering model and training settings.

Every key of :class:`~mvssm.model.ModelConfig` and
:class:`~mvssm.train.TrainConfig` may appear at the top level; ``seed`` is
shared. An optional ``variant`` key selects a size preset whose values the
other keys then override. Unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .train import TrainConfig

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
KNOWN_KEYS = frozenset(_MODEL_KEYS) | frozenset(_TRAIN_KEYS) | {"variant"}


def _check_type(key: str, value, default):
    # JSON has no tuples; bools are ints in Python but never valid numbers here
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{key}[{i}]", f"expected a number, got {v!r}")
        return
    elif default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"unexpected value {value!r} ({type(value).__name__})")


def config_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    base: dict = {}
    if "variant" in raw:
        if raw["variant"] not in VARIANTS:
            raise ConfigError("variant", f"must be one of {sorted(VARIANTS)}")
        base = dict(VARIANTS[raw["variant"]])
    model_kw, train_kw = dict(base), {}
    defaults_m, defaults_t = ModelConfig(), TrainConfig()
    for key, value in raw.items():
        if key == "variant":
            continue
        if key in _MODEL_KEYS:
            _check_type(key, value, getattr(defaults_m, key))
            model_kw[key] = value
        if key in _TRAIN_KEYS:
            _check_type(key, value, getattr(defaults_t, key))
            train_kw[key] = value
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def parse_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {**model_cfg.to_dict(), **train_cfg.to_dict()}
