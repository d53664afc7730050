"""JSON run configuration with dotted-path overrides.

Top-level sections: ``backbone``, ``adapter``, ``pretrain``, ``train``,
``data``, ``paths``. Every section is optional and falls back to the
desk-scale defaults; unknown keys anywhere are rejected. ``lambda_balance``
lives in ``adapter`` and is copied into the adaptation train config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .adapters import AdapterConfig
from .backbone import BackboneConfig, ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    count_per_task: int = 5000
    min_len: int = 2
    max_len: int = 6

    def __post_init__(self):
        if self.count_per_task < 10:
            raise ConfigError("data.count_per_task must be >= 10")
        if self.min_len < 1:
            raise ConfigError("data.min_len must be >= 1")
        if self.max_len < self.min_len:
            raise ConfigError("data.max_len must be >= data.min_len")

    @property
    def length_range(self) -> tuple[int, int]:
        return (self.min_len, self.max_len)


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 3e-3
    max_steps: int = 3000
    batch_size: int = 32
    warmup_steps: int | None = None
    eval_interval: int = 500
    seed: int = 0
    precision: str = "fp32"
    weight_decay: float = 0.01
    task_tags: bool = True

    def __post_init__(self):
        self.train_config()

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(learning_rate=self.learning_rate, lambda_balance=0.0, max_steps=self.max_steps,
                               batch_size=self.batch_size, warmup_steps=self.warmup_steps,
                               early_stop_patience=10 ** 9, eval_interval=self.eval_interval, seed=self.seed,
                               precision=self.precision, weight_decay=self.weight_decay)
        except ConfigError as exc:
            raise ConfigError(str(exc).replace("train.", "pretrain.")) from None


@dataclass(frozen=True)
class AdaptTrainConfig:
    learning_rate: float = 1e-2
    max_steps: int = 1000
    batch_size: int = 32
    warmup_steps: int | None = None
    early_stop_patience: int = 5
    eval_interval: int = 250
    seed: int = 0
    precision: str = "fp32"
    weight_decay: float = 0.01

    def __post_init__(self):
        self.train_config(0.0)

    def train_config(self, lambda_balance: float) -> TrainConfig:
        return TrainConfig(lambda_balance=lambda_balance, **asdict(self))


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs/default"
    backbone: str | None = None
    adapters: str | None = None

    def resolve(self, base: Path | None = None) -> "ResolvedPaths":
        out = Path(self.out_dir)
        if base is not None and not out.is_absolute():
            out = base / out
        return ResolvedPaths(
            out_dir=out,
            backbone=Path(self.backbone) if self.backbone else out / "backbone.ckpt",
            adapters=Path(self.adapters) if self.adapters else out / "adapters.ckpt",
        )


@dataclass(frozen=True)
class ResolvedPaths:
    out_dir: Path
    backbone: Path
    adapters: Path

    def file(self, name: str) -> Path:
        return self.out_dir / name


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: AdaptTrainConfig = field(default_factory=AdaptTrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        self.adapter.check_against(self.backbone.d_model)
        longest = max(2 * self.data.max_len + 3, 9)
        if longest > self.backbone.max_seq_len:
            raise ConfigError(f"data.max_len {self.data.max_len} needs backbone.max_seq_len >= {longest}")

    @property
    def adapt_train(self) -> TrainConfig:
        return self.train.train_config(self.adapter.lambda_balance)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {
    "backbone": BackboneConfig,
    "adapter": AdapterConfig,
    "pretrain": PretrainConfig,
    "train": AdaptTrainConfig,
    "data": DataConfig,
    "paths": PathsConfig,
}


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"{section} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    parts = {name: _build(cls, name, raw.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**parts)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON when possible."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"unknown key {key}")
        out.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
    return out


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    return from_dict(apply_overrides(raw, overrides))


def with_adapter(config: RunConfig, **changes) -> RunConfig:
    return replace(config, adapter=replace(config.adapter, **changes))
