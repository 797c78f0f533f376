"""Training configuration: nested dataclasses addressed by dotted keys.

A config file is one JSON document, either nested
(``{"train": {"mode": "baseline"}}``) or flat (``{"train.mode": "baseline"}``).
Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from forec.augment import AugmentConfig
from forec.errors import ConfigError

MODES = ("supervised", "baseline", "baseline+rec", "baseline+forec", "baseline+fgbg")
AUX_MODES = {"baseline+rec": 3, "baseline+forec": 3, "baseline+fgbg": 2}


@dataclass
class TrainSection:
    mode: str = "baseline+forec"
    lambda_ul: float = 0.5
    lambda_rec: float = 1.0
    ema_alpha: float = 0.99
    batch_size: int = 4
    epochs: int = 60
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.8
    seed: int = 0


@dataclass
class PseudoSection:
    tau: float = 0.95
    object_classes: list[int] | None = None  # None: every non-background class


@dataclass
class DataSection:
    path: str = ""
    labeled_fraction: float = 0.0625
    partition_seed: int | None = None  # None: reuse train.seed


@dataclass
class NetSection:
    base_width: int = 16
    stages: int = 2
    latent_width: int = 16


@dataclass
class TrainConfig:
    train: TrainSection = field(default_factory=TrainSection)
    pseudo: PseudoSection = field(default_factory=PseudoSection)
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "TrainConfig":
        t = self.train
        if t.mode not in MODES:
            raise ConfigError(f"unknown mode {t.mode!r}; choose from {', '.join(MODES)}", key="train.mode")
        for key in ("lambda_ul", "lambda_rec"):
            if getattr(t, key) < 0:
                raise ConfigError(f"train.{key} must be >= 0", key=f"train.{key}")
        if not 0 <= t.ema_alpha <= 1:
            raise ConfigError("train.ema_alpha must lie in [0, 1]", key="train.ema_alpha")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1", key="train.batch_size")
        if t.epochs < 0:
            raise ConfigError("train.epochs must be >= 0", key="train.epochs")
        if not 0 < self.data.labeled_fraction <= 1:
            raise ConfigError("data.labeled_fraction must lie in (0, 1]", key="data.labeled_fraction")
        if not 0 <= self.pseudo.tau <= 1:
            raise ConfigError("pseudo.tau must lie in [0, 1]", key="pseudo.tau")
        return self

    @property
    def partition_seed(self) -> int:
        return self.train.seed if self.data.partition_seed is None else self.data.partition_seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def flat(self) -> dict[str, Any]:
        return {f"{sec}.{k}": v for sec, body in self.to_dict().items() for k, v in body.items()}

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        merged = self.flat()
        merged.update(_flatten(overrides))
        return from_dict(merged)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in doc.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _coerce(key: str, value, default, annotation: str):
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{key} may not be null", key=key)
    try:
        if "list" in annotation:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return [int(v) for v in value]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if "int" in annotation and "float" not in annotation:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if "float" in annotation:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if "str" in annotation:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r} (expected {annotation})", key=key) from None
    return value


def from_dict(doc: dict) -> TrainConfig:
    cfg = TrainConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for key, value in _flatten(doc).items():
        sec_name, _, attr = key.partition(".")
        section = sections.get(sec_name)
        fields = {f.name: f for f in dataclasses.fields(section)} if section is not None else {}
        if attr not in fields:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        f = fields[attr]
        setattr(section, attr, _coerce(key, value, getattr(section, attr), str(f.type)))
    return cfg.validate()


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return from_dict(doc)
