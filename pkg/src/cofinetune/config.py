"""Experiment configuration: YAML in, validated dataclasses out."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .sampler import STRATEGIES
from .synthetic import SyntheticConfig
from .train import AugmentConfig, LossConfig, ScheduleConfig

COFINETUNE = "cofinetune"
SEQUENTIAL = "sequential"
MODES = (COFINETUNE, SEQUENTIAL)


@dataclass(frozen=True)
class BackboneConfig:
    """Model fields the user sets; input shape and heads come from the data."""

    tubelet: tuple[int, int, int] = (2, 8, 8)
    hidden_dim: int = 32
    num_layers: int = 2
    num_attention_heads: int = 4
    mlp_dim: int = 64
    stochastic_depth_rate: float = 0.2
    roi_grid: tuple[int, int] = (2, 2)
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "num_attention_heads", "mlp_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "num_layers" else 1):
                raise ConfigError(f"must be a positive integer, got {v!r}", f"model.{name}")
        if self.hidden_dim % self.num_attention_heads:
            raise ConfigError("must be a multiple of num_attention_heads", "model.hidden_dim")
        for name, n in (("tubelet", 3), ("roi_grid", 2)):
            v = tuple(getattr(self, name))
            if len(v) != n or not all(isinstance(x, int) and x >= 1 for x in v):
                raise ConfigError(f"must be {n} positive integers", f"model.{name}")
            object.__setattr__(self, name, v)
        if not 0.0 <= self.stochastic_depth_rate < 1.0:
            raise ConfigError("must be in [0, 1)", "model.stochastic_depth_rate")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("must be float32 or float64", "model.dtype")


@dataclass(frozen=True)
class DataSource:
    suite: str | None = None
    synthetic_seed: int | None = None
    synthetic: SyntheticConfig | None = None


@dataclass(frozen=True)
class StageConfig:
    dataset: str
    epochs: float
    warmup_epochs: float | None = None


@dataclass(frozen=True)
class EvaluationConfig:
    dataset: str | None = None
    proposal_threshold: float = 0.0
    frequency_from: str | None = None
    head_threshold: int = 10_000
    tail_threshold: int = 1_000
    batch_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = COFINETUNE
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSource = field(default_factory=DataSource)
    datasets: tuple[str, ...] = ()
    stages: tuple[StageConfig, ...] = ()
    model: BackboneConfig = field(default_factory=BackboneConfig)
    strategy: str = "weighted"
    batch_size: int = 16
    momentum: float = 0.9
    clip_norm: float | None = None
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(0.2, 2.5, 15.0))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    checkpoint_every: int = 0

    def training_datasets(self) -> tuple[str, ...]:
        if self.mode == SEQUENTIAL:
            seen = []
            for s in self.stages:
                if s.dataset not in seen:
                    seen.append(s.dataset)
            return tuple(seen)
        return self.datasets

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, path, converters=None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", path)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", f"{path}.{unknown[0]}" if path else unknown[0])
    kwargs = {}
    for k, v in raw.items():
        conv = (converters or {}).get(k)
        kwargs[k] = conv(v, f"{path}.{k}" if path else k) if conv else (tuple(v) if isinstance(v, list) else v)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path and exc.field and not exc.field.startswith(path):
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.field.split('.', 1)[-1]}") from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None


def _synthetic(raw, path):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", path)
    names = {f.name for f in fields(SyntheticConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", f"{path}.{unknown[0]}")
    try:
        return SyntheticConfig.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{(exc.field or '').split('.')[-1]}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None


def _stages(raw, path):
    if not isinstance(raw, list):
        raise ConfigError("expected a list", path)
    return tuple(_build(StageConfig, s, f"{path}[{i}]") for i, s in enumerate(raw))


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    cfg = _build(ExperimentConfig, raw, "", {
        "data": lambda v, p: _build(DataSource, v, p, {"synthetic": _synthetic}),
        "stages": _stages,
        "datasets": lambda v, p: tuple(v) if isinstance(v, list) else _raise(ConfigError("expected a list", p)),
        "model": lambda v, p: _build(BackboneConfig, v, p),
        "schedule": lambda v, p: _build(ScheduleConfig, v, p),
        "augment": lambda v, p: _build(AugmentConfig, v, p),
        "loss": lambda v, p: _build(LossConfig, v, p),
        "evaluation": lambda v, p: _build(EvaluationConfig, v, p),
    })
    validate(cfg)
    return cfg


def _raise(exc):
    raise exc


def validate(cfg: ExperimentConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"must be one of {MODES}", "mode")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"must be one of {STRATEGIES}", "strategy")
    if cfg.batch_size < 1:
        raise ConfigError("must be >= 1", "batch_size")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("must be in [0, 1)", "momentum")
    if (cfg.data.suite is None) == (cfg.data.synthetic is None and cfg.data.synthetic_seed is None):
        raise ConfigError("set exactly one of data.suite or data.synthetic/synthetic_seed", "data")
    if cfg.mode == COFINETUNE:
        if not cfg.datasets:
            raise ConfigError("cofinetune needs at least one dataset", "datasets")
        if len(set(cfg.datasets)) != len(cfg.datasets):
            raise ConfigError("datasets must be unique (one head per dataset)", "datasets")
        if cfg.stages:
            raise ConfigError("stages only apply to mode=sequential", "stages")
    else:
        if not cfg.stages:
            raise ConfigError("sequential needs at least one stage", "stages")
        for i, s in enumerate(cfg.stages):
            warm = cfg.schedule.warmup_epochs if s.warmup_epochs is None else s.warmup_epochs
            if not 0 < warm < s.epochs:
                raise ConfigError("need 0 < warmup_epochs < epochs", f"stages[{i}]")
    if cfg.clip_norm is not None and not cfg.clip_norm > 0:
        raise ConfigError("must be > 0 or null", "clip_norm")
    if cfg.checkpoint_every < 0:
        raise ConfigError("must be >= 0", "checkpoint_every")
    if cfg.evaluation.head_threshold < cfg.evaluation.tail_threshold:
        raise ConfigError("head_threshold must be >= tail_threshold", "evaluation.head_threshold")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse YAML: {exc}") from None
    return parse_config(raw or {})


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    new = replace(cfg, **changes)
    validate(new)
    return new
