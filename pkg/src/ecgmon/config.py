"""Application configuration.

The dataclasses below are the single source of defaults. A JSON config
file mirrors their nesting; every field also gets a command-line flag
``--<section>.<field-name>``. Precedence: defaults < config file < flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError
from .nn import DEFAULT_DROPOUT, DEFAULT_WIDTHS, TrainConfig


@dataclass
class PathsConfig:
    data_root: str = "data"
    dataset_dir: str = "dataset"
    model_path: str = "model.mlpw"
    storage_dir: str = "sessions"
    report_dir: str = "reports"


@dataclass
class SignalConfig:
    sample_rate_hz: int = 360
    cutoff_hz: float = 40.0
    order: int = 4


@dataclass
class SplitSection:
    train_fraction: float = 0.70
    test_fraction: float = 0.30
    validation_fraction_of_train: float = 0.10


@dataclass
class ModelConfig:
    widths: list = field(default_factory=lambda: list(DEFAULT_WIDTHS))
    dropout: float = DEFAULT_DROPOUT


@dataclass
class TrainSection:
    initial_lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    min_lr: float = 1e-5
    early_stop_patience: int = 10
    restore_best: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self), seed=seed)


@dataclass
class ServiceSection:
    host: str = "127.0.0.1"
    port: int = 9750
    max_sessions: int = 64
    max_frame_size: int = 2086


@dataclass
class SimulateSection:
    chunk: int = 360
    pacing: str = "max-speed"
    corrupt_prob: float = 0.0
    drop_prob: float = 0.0
    gain_uv_per_lsb: float = 1.0


@dataclass
class AppConfig:
    seed: int = 42
    paths: PathsConfig = field(default_factory=PathsConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    service: ServiceSection = field(default_factory=ServiceSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = ("paths", "signal", "split", "model", "train", "service", "simulate")


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return [int(v) for v in value]
    return str(value)


def apply_overrides(cfg: AppConfig, values: dict) -> AppConfig:
    """Apply a nested dict (config-file shape) onto ``cfg`` in place."""
    for key, val in values.items():
        if key == "seed":
            cfg.seed = int(val)
            continue
        if key not in SECTIONS or not isinstance(val, dict):
            raise SchemaError(f"unknown config key {key!r}")
        section = getattr(cfg, key)
        names = {f.name for f in dataclasses.fields(section)}
        for k, v in val.items():
            if k not in names:
                raise SchemaError(f"unknown config key {key}.{k}")
            try:
                setattr(section, k, _coerce(v, getattr(section, k)))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"bad value for {key}.{k}: {exc}") from None
    return cfg


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config file must hold a JSON object")
    return doc


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Register ``--config``, ``--seed`` and one flag per config field."""
    parser.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 42)")
    defaults = AppConfig()
    group = parser.add_argument_group("configuration overrides")
    for sec in SECTIONS:
        for f in dataclasses.fields(getattr(defaults, sec)):
            default = getattr(getattr(defaults, sec), f.name)
            shown = ",".join(map(str, default)) if isinstance(default, list) else default
            group.add_argument(
                f"--{sec}.{f.name.replace('_', '-')}",
                dest=f"cfg__{sec}__{f.name}",
                default=argparse.SUPPRESS,
                metavar=type(default).__name__.upper(),
                help=f"(default {shown})",
            )


def resolve_config(args: argparse.Namespace) -> AppConfig:
    cfg = AppConfig()
    ns = vars(args)
    if "config" in ns:
        apply_overrides(cfg, load_config_file(ns["config"]))
    flags: dict = {}
    for key, val in ns.items():
        if key.startswith("cfg__"):
            _, sec, name = key.split("__", 2)
            flags.setdefault(sec, {})[name] = val
    apply_overrides(cfg, flags)
    if "seed" in ns:
        cfg.seed = int(ns["seed"])
    return cfg
