"""Experiment configuration: a YAML file of sections, overridden by ``section.key=value`` pairs.

Example file::

    backbone:
      weights: /data/vgg19_imagenet.pth
    generator:
      width: 64
      num_blocks: 6
    train:
      epochs: 60
      crop_size: 224
    loss:
      omega3: 0.01
    synthesis:
      blur_sigma_range: [2, 5]
"""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .imaging import SynthesisParams
from .losses import LossWeights
from .network import DiscriminatorConfig, GeneratorConfig
from .training import TrainConfig

SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "synthesis": SynthesisParams,
}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    cfg: dict = {"backbone": {"weights": None}}
    for name, cls in SECTIONS.items():
        obj = cls()
        cfg[name] = {f.name: copy.deepcopy(getattr(obj, f.name)) for f in fields(cls) if f.name != "blur_kernel"}
    return _plain(cfg)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _set(cfg: dict, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    if section not in cfg:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in cfg[section]:
        raise ConfigError(f"unknown key {dotted!r}")
    cfg[section][key] = value


def parse_value(raw: str):
    """YAML scalar parsing, plus exponent floats such as ``1e-5`` that YAML 1.1 leaves as strings."""
    return _coerce(yaml.safe_load(raw))


def _coerce(value):
    if isinstance(value, list):
        return [_coerce(v) for v in value]
    if isinstance(value, str) and any(c.isdigit() for c in value):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: section {section!r} must be a mapping")
            for key, value in values.items():
                _set(cfg, f"{section}.{key}", _coerce(value))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must be key=value")
        _set(cfg, key.strip(), parse_value(raw))
    build(cfg)  # validate eagerly
    return cfg


def build(cfg: dict) -> dict:
    """Instantiate the typed records of every section."""
    out = {}
    for name, cls in SECTIONS.items():
        values = dict(cfg[name])
        for k in ("blur_sigma_range", "reflection_weight_range", "betas"):
            if k in values and values[k] is not None:
                values[k] = tuple(values[k])
        try:
            out[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} config: {exc}") from exc
    return out


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(cfg), sort_keys=True))
