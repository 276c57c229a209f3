"""Plain-text ``key=value`` training configs."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .pipeline import TrainConfig
from .segnet import OPERATORS

AGGREGATIONS = ("average", "sum", "concat")


def _convert(name: str, kind: type, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` starts a comment) over ``base``; unknown keys are rejected."""
    types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, types[key], raw)
    if values.get("operator", base.operator) not in OPERATORS:
        raise ConfigError(f"operator must be one of {OPERATORS}")
    if values.get("aggregation", base.aggregation) not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
    try:
        return base.replace(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{f.name}={getattr(config, f.name)}\n" for f in dataclasses.fields(config))
