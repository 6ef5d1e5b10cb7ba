"""Resolved run configuration: every knob of a run in one flat ``section.key = value`` file.

Values are JSON literals (``0.95``, ``true``, ``[320, 320]``, ``"path"``); bare
words are accepted as strings. Later sources win: defaults < presets < config
file < command-line ``--set`` overrides.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .augment import AugConfig
from .data import GeneratorSpec
from .engine import TrainConfig
from .objective import LossConfig
from .segnet import ModelConfig


@dataclass
class DataConfig:
    root: str = ""
    labeled_ratio: float = 0.05
    split_seed: int = 0
    eval_split: str = "test"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorSpec = field(default_factory=lambda: GeneratorSpec(image_size=(320, 320)))
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    SECTIONS = ("data", "generator", "model", "aug", "train", "loss")

    def to_flat(self) -> dict:
        flat = {}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                flat[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def dump(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_flat().items())

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    def set(self, key: str, value):
        sec, _, name = key.partition(".")
        if sec not in self.SECTIONS or not name:
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(self, sec)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        setattr(obj, name, _coerce(value, current, key))

    def update(self, items: dict):
        for k, v in items.items():
            self.set(k, v)
        return self

    def validate(self):
        self.generator.validate()
        self.model.validate()
        self.aug.validate()
        self.train.validate()
        self.loss.validate()
        if self.model.n_classes != self.generator.n_classes:
            raise ValueError("model.n_classes must match generator.n_classes")

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        return cls().update(flat)


def _coerce(value, current, key):
    if isinstance(value, str) and not isinstance(current, str):
        value = parse_value(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{key} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{key} expects a list, got {value!r}")
        return list(value)
    if isinstance(current, str):
        return str(value)
    return value


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        out[key.strip()] = parse_value(value)
    return out


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# presets

_OFF = {"train.use_vam": False, "train.use_vcm": False, "train.use_ca": False, "train.use_fa": False}

PRESETS: dict[str, dict] = {
    "icaf": {},
    "supervised-only": {**_OFF, "loss.lam": 0.0},
    "semi-baseline": {**_OFF, "train.semi_baseline": True, "train.O": 1, "train.P": 0, "train.Q": 1},
    "group-baseline": {**_OFF, "train.group_baseline_only": True, "train.O": 3, "train.P": 0, "train.Q": 2},
    "group+ca": {**_OFF, "train.use_ca": True, "train.O": 3, "train.P": 0, "train.Q": 2},
    "group+ca+fa": {**_OFF, "train.use_ca": True, "train.use_fa": True, "train.O": 3, "train.P": 0,
                    "train.Q": 2},
    "group+ca+fa+vam": {"train.use_vcm": False, "train.P": 0},
}

# rows of the component ablation, in table order
TOGGLE_GRID = ["semi-baseline", "group-baseline", "group+ca", "group+ca+fa", "group+ca+fa+vam", "icaf"]

# reduced-cost settings for CPU experiments on 128x128 synthetic data
DESK: dict = {
    "generator.image_size": [128, 128],
    "model.widths": [16, 32, 64, 64],
    "model.output_stride": 4,
    "model.decoder_channels": 32,
    "model.wgu_widths": [8, 16, 16],
    "train.image_size": [64, 64],
    "train.labeled_per_batch": 4,
    "train.unlabeled_per_batch": 4,
    "train.base_lr": 0.01,
    "train.epochs": 40,
    "train.labeled_path": "vam",
    "train.keep_checkpoints": 1,
}


def resolve(presets: Iterable[str] = (), file: Optional[str] = None, overrides: Optional[dict] = None,
            desk: bool = False) -> RunConfig:
    cfg = RunConfig()
    if desk:
        cfg.update(DESK)
    for name in presets:
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        cfg.update(PRESETS[name])
    if file:
        cfg.update(load_config_file(file))
    if overrides:
        cfg.update(overrides)
    cfg.validate()
    return cfg
