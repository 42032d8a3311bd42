"""Nested configuration with dotted-key overrides and a fingerprint of the
settings that change the trained network."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class SyntheticData:
    T: int = 7
    H: int = 64
    W: int = 64
    num_clips: int = 8
    max_speed: float = 2.0
    seed: int = 0


@dataclass
class DataConfig:
    synthetic: SyntheticData = field(default_factory=SyntheticData)
    crop_lr: int = 32
    scale: int = 4
    path: str | None = None  # manifest or clip directory; synthetic when unset
    heldout_seed: int = 1000
    heldout_clips: int = 1


@dataclass
class STFIConfig:
    shared: bool = True
    num_shared_blocks: int = 5
    flow: str = "adapted"  # adapted | unadapted | none


@dataclass
class STLRConfig:
    enabled: bool = True
    inet: bool = True
    offsets: str = "both"  # both | lr_only | hr_only


@dataclass
class EdgeConfig:
    EF: bool = True
    EP: bool = True
    ET: bool = True


@dataclass
class STGRConfig:
    enabled: bool = True
    layers: int = 4
    edge: EdgeConfig = field(default_factory=EdgeConfig)


@dataclass
class ModelConfig:
    channels: int = 64
    branches: str = "both"  # both | lr | hr
    base: str = "none"  # none | bicubic: add a bicubic, time-blended copy of the inputs to the output
    stfi: STFIConfig = field(default_factory=STFIConfig)
    stlr: STLRConfig = field(default_factory=STLRConfig)
    stgr: STGRConfig = field(default_factory=STGRConfig)


@dataclass
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1


@dataclass
class MCLConfig:
    abs: str = "on"  # on | off | adjacent
    abs_norm: str = "l2"  # l2 | l1
    rel: str = "on"  # on | off | strong


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = 4.0
    decay_every: int = 2000
    total_iters: int = 5000
    batch_size: int = 4
    seed: int = 0
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not self.decay_factor > 1:
            raise ValueError(f"decay_factor must exceed 1, got {self.decay_factor}")


@dataclass
class FlowConfig:
    checkpoint: str | None = None  # estimator state dict; cached desk default when unset


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mcl: MCLConfig = field(default_factory=MCLConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that shapes the network or its objective."""
        keyed = {k: self.to_dict()[k] for k in ("model", "loss", "mcl")}
        return hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()[:16]


# YAML 1.1 reads on/off as booleans
_SWITCHES = {("mcl", "abs"), ("mcl", "rel")}


def _build(cls, values: dict, path=()):
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in (values or {}).items():
        if key not in known:
            raise KeyError(f"unknown config key {'.'.join(path + (key,))}")
        f = known[key]
        sub = f.default_factory if dataclasses.is_dataclass(f.default_factory) else None
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value, path + (key,))
        elif path[-1:] + (key,) in _SWITCHES and isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(f.default, float) and isinstance(value, (str, int)) and not isinstance(value, bool):
            value = float(value)  # YAML 1.1 reads 1e-4 as a string
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(values: dict) -> Config:
    return _build(Config, values)


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested dict (values parsed as YAML)."""
    values = json.loads(json.dumps(values))
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        node = values
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_scalar(raw)
    return values


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    values = {}
    if path is not None:
        text = Path(path).read_text()
        values = json.loads(text) if str(path).endswith(".json") else (yaml.safe_load(text) or {})
    if overrides:
        values = apply_overrides(values, overrides)
    return from_dict(values)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
