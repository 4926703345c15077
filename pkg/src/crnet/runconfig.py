"""Flat, namespaced run configuration shared by every CLI command.

Keys look like ``model.base_channels`` or ``train.crop`` and map onto
the architecture, training, degradation, and scene dataclasses. Config
files are plain ``key = value`` lines with ``#`` comments; command-line
overrides win over file values. Unknown keys are rejected, and every
key has a documented default that shows up in ``--help``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

from .model import CRNetConfig
from .synth import DegradeSpec, SceneSpec
from .train import DESK_MODEL_OVERRIDES, DESK_TRAIN_OVERRIDES, TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or unparseable config text."""


_SECTIONS = (
    ("model", CRNetConfig),
    ("train", TrainConfig),
    ("data", DegradeSpec),
    ("scene", SceneSpec),
)
# Not settable through the flat key space: per-sample seeds and motion
# curves are derived, not configured.
_EXCLUDED = {("scene", "seed"), ("scene", "motion")}


def registry() -> Dict[str, object]:
    """Ordered mapping of every accepted key to its default value."""
    reg: Dict[str, object] = {}
    for prefix, cls in _SECTIONS:
        for f in dataclasses.fields(cls):
            if (prefix, f.name) in _EXCLUDED:
                continue
            if f.default is not dataclasses.MISSING:
                default = f.default
            else:
                default = f.default_factory()  # type: ignore[misc]
            reg[f"{prefix}.{f.name}"] = default
    return reg


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def describe_keys() -> str:
    lines = ["configuration keys (key = value lines in --config files, or --set key=value):"]
    for key, default in registry().items():
        lines.append(f"  {key} = {_format_value(default)}")
    return "\n".join(lines)


def _parse_value(key: str, text: str, default) -> object:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(part) for part in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from None


@dataclass
class RunConfig:
    model: CRNetConfig
    train: TrainConfig
    degrade: DegradeSpec
    scene: SceneSpec

    def section(self, prefix: str):
        return {
            "model": self.model,
            "train": self.train,
            "data": self.degrade,
            "scene": self.scene,
        }[prefix]


def build_run_config(values: Dict[str, object]) -> RunConfig:
    """Materialize the dataclasses from a flat key -> value mapping."""
    reg = registry()
    for key in values:
        if key not in reg:
            raise ConfigError(f"unknown config key {key!r}")
    kwargs: Dict[str, Dict[str, object]] = {prefix: {} for prefix, _ in _SECTIONS}
    for key, value in values.items():
        prefix, name = key.split(".", 1)
        kwargs[prefix][name] = value
    cfg = RunConfig(
        model=CRNetConfig(**kwargs["model"]),
        train=TrainConfig(**kwargs["train"]),
        degrade=DegradeSpec(**kwargs["data"]),
        scene=SceneSpec(**kwargs["scene"]),
    )
    cfg.model.validate()
    cfg.train.validate()
    cfg.degrade.validate()
    cfg.scene.validate()
    return cfg


def parse_config_file(path) -> Dict[str, object]:
    """Read ``key = value`` lines; '#' starts a comment."""
    reg = registry()
    values: Dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in reg:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, value, reg[key])
    return values


def parse_overrides(pairs) -> Dict[str, object]:
    """--set key=value command-line overrides."""
    reg = registry()
    values: Dict[str, object] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in reg:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, value, reg[key])
    return values


def desk_preset() -> Dict[str, object]:
    values: Dict[str, object] = {}
    for name, value in DESK_MODEL_OVERRIDES.items():
        values[f"model.{name}"] = value
    for name, value in DESK_TRAIN_OVERRIDES.items():
        values[f"train.{name}"] = value
    values["scene.size"] = (32, 32)
    return values


def resolve(config_file=None, overrides=None, preset: str | None = None) -> RunConfig:
    """Layer defaults <- preset <- config file <- --set overrides."""
    values: Dict[str, object] = {}
    if preset == "desk":
        values.update(desk_preset())
    elif preset is not None:
        raise ConfigError(f"unknown preset {preset!r}; available: desk")
    if config_file is not None:
        values.update(parse_config_file(config_file))
    values.update(parse_overrides(overrides))
    return build_run_config(values)
