"""Named presets and flat key=value overrides for pretraining and downstream runs."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .pretrain import PretrainConfig
from .segmentation import DownstreamConfig
from .unet import UNetConfig

# Paper-scale presets share these; only the pretraining batch size differs per dataset.
_PAPER_COMMON = {
    "epochs_per_partition": 1000,
    "target_patches": 512,
    "crop_size": 256,
    "downstream.epochs": 500,
    "downstream.batch_size": 8,
    "downstream.crop_size": 256,
}

PRESETS: dict[str, dict] = {
    "desk": {
        "downstream.epochs": 30,
        "downstream.batch_size": 8,
    },
    "paper-pascal": {**_PAPER_COMMON, "batch_size": 128},
    "paper-cityscapes": {**_PAPER_COMMON, "batch_size": 128},
    "paper-nassar": {**_PAPER_COMMON, "batch_size": 256},
    "paper-sugarbeets": {**_PAPER_COMMON, "batch_size": 64},
}


class ConfigError(ValueError):
    pass


_PRETRAIN_KEYS = {f.name for f in fields(PretrainConfig)} - {"model"}
_MODEL_KEYS = {f.name for f in fields(UNetConfig)} - {"head", "out_channels"}
_DOWNSTREAM_KEYS = {f.name for f in fields(DownstreamConfig)}


def known_keys() -> list[str]:
    return sorted(
        list(_PRETRAIN_KEYS)
        + [f"model.{k}" for k in _MODEL_KEYS]
        + [f"downstream.{k}" for k in _DOWNSTREAM_KEYS]
    )


def parse_value(text: str):
    """JSON literal when it parses (numbers, null, lists), bare string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = parse_value(value.strip())
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return data


def resolve(preset: str = "desk", config_file=None, overrides=None) -> dict:
    """Preset, then config file, then overrides; later layers win."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    flat = dict(PRESETS[preset])
    if config_file is not None:
        flat.update(read_config_file(config_file))
    flat.update(overrides or {})
    unknown = sorted(set(flat) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return flat


def pretrain_config(flat: dict) -> PretrainConfig:
    model = {k[6:]: v for k, v in flat.items() if k.startswith("model.")}
    kwargs = {k: v for k, v in flat.items() if k in _PRETRAIN_KEYS}
    try:
        return PretrainConfig(**kwargs, model=UNetConfig(**model))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def downstream_config(flat: dict) -> DownstreamConfig:
    kwargs = {k[11:]: v for k, v in flat.items() if k.startswith("downstream.")}
    try:
        cfg = DownstreamConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    if cfg.epochs < 0 or cfg.batch_size < 1:
        raise ConfigError("downstream epochs must be >= 0 and batch size >= 1")
    return cfg
