"""Experiment configuration: dataclass sections with flat dotted-key JSON I/O.

Config files are plain JSON objects whose keys look like ``train.seed`` or
``encoder.D``; command-line ``--set key=value`` overrides use the same
notation. Values are parsed with JSON semantics, falling back to strings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import EncoderConfig
from .irm import IrmConfig
from .losses import LossConfig
from .tcp import TcpConfig


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-4
    batch_size: int = 128
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    precision_mode: str = "train32"  # "train32" or "check64"
    alpha: float = 0.7  # fusion weight used for validation ranking
    ice: bool = True
    irm: bool = True
    tcp: bool = True
    w_ice: float = 1.0
    w_irm: float = 1.0
    w_tcp: float = 1.0
    ice_threshold: float = 0.4
    ice_warmup_epochs: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not (0 <= self.early_stop_patience <= max(self.max_epochs, 1)):
            raise ValueError("early_stop_patience must be in [0, max_epochs]")
        if self.precision_mode not in ("train32", "check64"):
            raise ValueError("precision_mode must be 'train32' or 'check64'")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    irm: IrmConfig = field(default_factory=IrmConfig)
    tcp: TcpConfig = field(default_factory=TcpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.loss.validate()
        self.tcp.validate()
        self.train.validate()

    def to_flat(self) -> dict:
        flat = {}
        for section_field in dataclasses.fields(self):
            section = getattr(self, section_field.name)
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                if isinstance(value, tuple):
                    value = list(value)
                flat[f"{section_field.name}.{f.name}"] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        cfg = cls()
        cfg.apply_flat(flat)
        return cfg

    def apply_flat(self, flat: dict) -> None:
        for key, value in flat.items():
            self.set_option(key, value)

    def set_option(self, dotted_key: str, value) -> None:
        if "." not in dotted_key:
            raise KeyError(f"config key {dotted_key!r} must look like 'section.field'")
        section_name, field_name = dotted_key.split(".", 1)
        section_fields = {f.name for f in dataclasses.fields(self)}
        if section_name not in section_fields:
            raise KeyError(f"unknown config section {section_name!r}")
        section = getattr(self, section_name)
        names = {f.name for f in dataclasses.fields(section)}
        if field_name not in names:
            raise KeyError(f"unknown config key {dotted_key!r}")
        current = getattr(section, field_name)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(section, field_name, value)


def parse_override(text: str):
    """Parse a ``key=value`` override; value uses JSON syntax with a string fallback."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            flat = json.load(fh)
        cfg.apply_flat(flat)
    for item in overrides or []:
        key, value = parse_override(item)
        cfg.set_option(key, value)
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_flat(), fh, indent=2, sort_keys=True)
        fh.write("\n")
