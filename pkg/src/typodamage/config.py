"""YAML experiment config with strict keys and environment overrides.

A config document has up to four sections, each mirroring one dataclass:

    model:    ModelConfig
    train:    TrainConfig
    augment:  AugmentationPolicy
    upsample: UpsampleRule

Any key not naming a field is an error. Environment variables of the form
``TYPODAMAGE_<SECTION>__<FIELD>`` override file values; their text is parsed
as YAML, so ``TYPODAMAGE_TRAIN__SEEDS='[1, 2]'`` works.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .datapipe import AugmentationPolicy, UpsampleRule
from .errors import ConfigurationError
from .model import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "TYPODAMAGE_"
SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentationPolicy,
    "upsample": UpsampleRule,
}
PRESETS = {
    "full": {},
    "reduced": {"model": {"input_side": 128, "stage_channels": [16, 32, 64, 64], "stem_channels": 8},
                "augment": {"crop_side": 128}},
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    upsample: UpsampleRule = field(default_factory=UpsampleRule)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.train.validate()
        self.augment.validate()
        if self.augment.crop_side % 2 ** self.model.num_stages:
            raise ConfigurationError(
                f"augment.crop_side {self.augment.crop_side} must be divisible by "
                f"2**{self.model.num_stages} to pass through the encoder"
            )
        return self

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: sorted(v) if isinstance(v, frozenset) else v for k, v in d.items()}
        return _plain(out)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, frozenset, set)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, name: str, value):
    if cls is UpsampleRule:
        return frozenset(int(v) for v in value)
    if cls is AugmentationPolicy and name in ("rotations", "blur_radius_range"):
        return tuple(value)
    return value


def merge_section(obj, values: Mapping[str, Any], section: str):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown {section} keys: {', '.join(unknown)}")
    cls = type(obj)
    return dataclasses.replace(obj, **{k: _coerce(cls, k, v) for k, v in values.items()})


def apply_overrides(cfg: ExperimentConfig, doc: Mapping[str, Mapping[str, Any]]) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown config sections: {', '.join(unknown)}")
    for section, values in doc.items():
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise ConfigurationError(f"section {section!r} must be a mapping")
        setattr(cfg, section, merge_section(getattr(cfg, section), values, section))
    return cfg


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    doc: dict[str, dict] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigurationError(f"{key}: expected {ENV_PREFIX}<SECTION>__<FIELD>")
        section, name = rest.split("__", 1)
        doc.setdefault(section.lower(), {})[name.lower()] = yaml.safe_load(raw)
    return doc


def load_config(path=None, preset: str = "full", environ=None, overrides=None) -> ExperimentConfig:
    """Defaults, then preset, then file, then environment, then explicit overrides."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = apply_overrides(ExperimentConfig(), PRESETS[preset])
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, Mapping):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        cfg = apply_overrides(cfg, doc)
    cfg = apply_overrides(cfg, env_overrides(environ))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
