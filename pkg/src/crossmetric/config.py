"""Pipeline configuration: nested dataclasses read from and written to JSON.

Unknown keys anywhere in the document are errors, so a typo cannot silently
fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import RefineConfig, SyntheticConfig
from .losses import Margins
from .nn import SgdConfig


class ConfigError(ValueError):
    pass


@dataclass
class MarginConfig:
    # "lambda" on disk; it is a Python keyword
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def to_margins(self) -> Margins:
        return Margins(self.lam, self.alpha, self.beta)


@dataclass
class StageConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.004
    batch_size: int = 64
    max_iterations: int = 5000

    def to_sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.weight_decay, self.batch_size, self.max_iterations)


@dataclass
class RefineStage:
    hidden_dim: int = 1024
    learning_rate: float = 0.01
    weight_decay: float = 0.004
    batch_size: int = 64
    max_iterations: int = 2000

    def to_refine(self) -> RefineConfig:
        return RefineConfig(self.hidden_dim, self.learning_rate, self.weight_decay,
                            self.batch_size, self.max_iterations)


@dataclass
class DatasetConfig:
    manifest: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    split_fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    margins: MarginConfig = field(default_factory=MarginConfig)
    pretrain: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=StageConfig)
    metric: StageConfig = field(default_factory=StageConfig)
    refine: RefineStage = field(default_factory=RefineStage)
    pair_count: int | None = None
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    skip_pretrain: bool = False
    use_intra_refine: bool = False
    baseline_only: bool = False
    seed: int = 0
    out_dir: str = "runs/default"


_RENAMES = {"lam": "lambda"}
_UNRENAMES = {v: k for k, v in _RENAMES.items()}


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, list):
            value = list(value)
        out[_RENAMES.get(f.name, f.name)] = value
    return out


def from_dict(cls, data: dict, where: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _UNRENAMES.get(key, key)
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value, f"{where}.{key}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def validate(cfg: PipelineConfig) -> PipelineConfig:
    for stage in ("pretrain", "finetune", "metric"):
        try:
            getattr(cfg, stage).to_sgd()
        except ValueError as exc:
            raise ConfigError(f"{stage}: {exc}") from None
    try:
        cfg.margins.to_margins()
    except ValueError as exc:
        raise ConfigError(f"margins: {exc}") from None
    for name in ("hidden_activation", "output_activation"):
        if getattr(cfg, name) not in ("relu", "sigmoid", "identity"):
            raise ConfigError(f"{name}: unknown activation {getattr(cfg, name)!r}")
    if cfg.pair_count is not None and cfg.pair_count < 2:
        raise ConfigError("pair_count must be at least 2")
    return cfg


def loads(text: str) -> PipelineConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return validate(from_dict(PipelineConfig, data))


def dumps(cfg: PipelineConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path: str | os.PathLike) -> PipelineConfig:
    return loads(Path(path).read_text())


def save(path: str | os.PathLike, cfg: PipelineConfig) -> None:
    Path(path).write_text(dumps(cfg))
