"""Run configuration files: four YAML sections with strict keys and a resolved-config hash.

Grammar (every key optional)::

    seed: 0                 # master seed; per-section seeds derive from it
    data:  {identities, renders, val_identities, val_renders, canvas, seed}
    model: {config: desk|paper, num_classes}
    train: {<TrainConfig field>..., noise_eps}   # over the desk or paper preset
    eval:  {pairs, folds, modes, roc_points, seed}
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .train import DESK_TRAIN, PAPER_TRAIN, TrainConfig


class ConfigError(ValueError):
    pass


def sub_seed(master: int, name: str) -> int:
    """Independent named stream derived from the master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


@dataclass
class DataSection:
    identities: int = 20
    renders: int = 30
    val_identities: int = 10
    val_renders: int = 12
    canvas: int = 144
    seed: Optional[int] = None


@dataclass
class ModelSection:
    config: str = "desk"
    num_classes: Optional[int] = None  # defaults to the number of training identities


@dataclass
class EvalSection:
    pairs: int = 600
    folds: int = 10
    modes: list = field(default_factory=lambda: ["m1", "m2", "m3", "m4", "m5", "m6", "m7", "random", "whole"])
    roc_points: int = 101
    seed: Optional[int] = None


TRAIN_EXTRA = ("noise_eps",)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: dict = field(default_factory=dict)  # TrainConfig overrides plus noise_eps
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.data.seed is None:
            self.data.seed = sub_seed(self.seed, "data")
        if self.eval.seed is None:
            self.eval.seed = sub_seed(self.seed, "eval")
        self.train.setdefault("seed", sub_seed(self.seed, "train"))
        self.train_config()  # validate early

    def train_config(self, **overrides) -> TrainConfig:
        base = (PAPER_TRAIN if self.model.config == "paper" else DESK_TRAIN).to_dict()
        kw = {k: v for k, v in {**base, **self.train, **overrides}.items() if k not in TRAIN_EXTRA}
        try:
            return TrainConfig(**kw)
        except TypeError as exc:
            raise ConfigError(f"train section: {exc}") from None

    @property
    def noise_eps(self) -> float:
        return float(self.train.get("noise_eps", 0.0))

    def resolved(self) -> dict:
        tc = self.train_config().to_dict()
        return {
            "seed": self.seed,
            "data": vars(self.data).copy(),
            "model": vars(self.model).copy(),
            "train": {**tc, "noise_eps": self.noise_eps},
            "eval": vars(self.eval).copy(),
        }

    def digest(self) -> str:
        return config_hash(self.resolved())


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _section(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(known)}")
    return cls(**raw)


def from_dict(raw: Optional[dict]) -> RunConfig:
    raw = dict(raw or {})
    allowed = {"seed", "data", "model", "train", "eval"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed {sorted(allowed)}")
    train = raw.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train: expected a mapping")
    known = {f.name for f in fields(TrainConfig)} | set(TRAIN_EXTRA)
    bad = sorted(set(train) - known)
    if bad:
        raise ConfigError(f"train: unknown key(s) {bad}; allowed {sorted(known)}")
    try:
        return RunConfig(
            seed=int(raw.get("seed", 0)),
            data=_section(DataSection, raw.get("data"), "data"),
            model=_section(ModelSection, raw.get("model"), "model"),
            train=dict(train),
            eval=_section(EvalSection, raw.get("eval"), "eval"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)
