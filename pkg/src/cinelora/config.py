"""Flat key/value run configuration shared by every CLI subcommand.

A config file is a TOML document with top-level keys only.  Keys belong to
one of four groups (data, model, train, generate); ``seed`` feeds all of them.
Command-line overrides win over file values, and everything is validated
before any work starts.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DATA_DEFAULTS = {
    "n_clips": 40,
    "val_fraction": 0.1,
    "min_frames": 40,
    "max_frames": 120,
    "styled": True,
    "ingest_dir": "",
}

GEN_DEFAULTS = {
    "num_frames": 96,
    "cfg_scale": 3.8,
    "steps": 30,
    "shards": 1,
    "overlap": 4,
    "fps": 24,
    "flow_block": 4,
    "flow_radius": 3,
}

BASE_DEFAULTS = {
    "base_steps": 1500,
    "base_lr": 1e-3,
}

_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]

_TUPLE_KEYS = {"frame_size", "lora_encoder_range", "lora_decoder_range"}


def _defaults() -> dict:
    d = {}
    d.update(DATA_DEFAULTS)
    d.update({k: v for k, v in ModelConfig().to_dict().items() if k in _MODEL_KEYS})
    d.update(TrainConfig().to_dict())
    d.update(GEN_DEFAULTS)
    d.update(BASE_DEFAULTS)
    return d


DEFAULTS = _defaults()


def _coerce(key: str, value, default):
    """Coerce ``value`` (from TOML or a command-line string) to the type of ``default``."""
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value) if not value.lower() in ("true", "false") else value.lower() == "true"
        except json.JSONDecodeError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} integers, got {value!r}")
        return tuple(int(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


class RunConfig:
    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v, DEFAULTS[k])
        self.values = merged
        self._validate()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                doc = tomllib.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            nested = [k for k, v in doc.items() if isinstance(v, dict)]
            if nested:
                raise ConfigError(f"config must be flat; found tables {nested}")
            values.update(doc)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def _validate(self) -> None:
        v = self.values
        try:
            self.model()
            self.train()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 < v["val_fraction"] < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if v["n_clips"] < 2:
            raise ConfigError("n_clips must be >= 2")
        if not 1 <= v["min_frames"] <= v["max_frames"]:
            raise ConfigError("need 1 <= min_frames <= max_frames")
        if v["num_frames"] < 1 or v["steps"] < 1 or v["shards"] < 1 or v["overlap"] < 0:
            raise ConfigError("num_frames, steps and shards must be >= 1 and overlap >= 0")
        if v["steps"] > v["T_diff"]:
            raise ConfigError("steps must not exceed T_diff")
        if v["cfg_scale"] < 0:
            raise ConfigError("cfg_scale must be >= 0")
        if v["fps"] < 1 or v["flow_block"] < 1 or v["flow_radius"] < 0:
            raise ConfigError("fps and flow_block must be >= 1, flow_radius >= 0")
        if v["base_steps"] < 1 or v["base_lr"] <= 0:
            raise ConfigError("base_steps must be >= 1 and base_lr positive")
        if self.train().window > v["min_frames"] and not v["ingest_dir"]:
            raise ConfigError("min_frames must be at least the training window length")

    def model(self) -> ModelConfig:
        return ModelConfig(**{k: (tuple(self.values[k]) if k in _TUPLE_KEYS else self.values[k])
                              for k in _MODEL_KEYS})

    def train(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS})

    def base_train(self) -> TrainConfig:
        t = self.train().to_dict()
        t.update(total_steps=self["base_steps"], lr_peak=self["base_lr"], lambda_temporal=0.0,
                 eval_interval=min(t["eval_interval"], self["base_steps"]), patience=10**6)
        return TrainConfig(**t)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
