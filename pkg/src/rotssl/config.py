"""Experiment configuration: nested dataclasses loaded from / dumped to JSON.

Unknown keys are rejected and every value is validated before a run starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from rotssl.augment import AugConfig

FILTER_KINDS = ("dynamic_entropy", "fixed_entropy", "geodesic", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FilterPolicy:
    """Pseudo-label gate for the unsupervised loss.

    ``fixed_tau = None`` with ``kind="fixed_entropy"`` freezes the threshold
    computed at the first Phase2 sweep. ``kind="none"`` keeps every sample
    (plain Mean-Teacher).
    """

    kind: str = "dynamic_entropy"
    delta: float = 0.75
    fixed_tau: float | None = None
    geo_thresh: float = 30.0
    K: int = 4
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ConfigError(f"filter.kind must be one of {FILTER_KINDS}, got {self.kind!r}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"filter.delta must lie in (0, 1], got {self.delta}")
        if self.K < 1:
            raise ConfigError(f"filter.K must be >= 1, got {self.K}")
        if self.lam < 0:
            raise ConfigError("filter.lam must be non-negative")
        if self.geo_thresh <= 0:
            raise ConfigError("filter.geo_thresh must be positive")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_labeled: int = 500
    n_unlabeled: int = 4500
    ood_frac: float = 0.25
    n_val: int = 500
    n_test: int = 500

    def __post_init__(self):
        for name in ("n_labeled", "n_unlabeled", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be non-negative")
        if not 0.0 <= self.ood_frac < 1.0:
            raise ConfigError("data.ood_frac must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    phase1_iters: int = 2000
    phase2_iters: int = 2000
    batch_labeled: int = 8
    batch_unlabeled: int = 32
    ema_decay: float = 0.999
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    eval_every: int = 200
    labeled_aug: str = "weak"
    unsup_target: str = "distribution"

    def __post_init__(self):
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("train.ema_decay must lie in (0, 1)")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every must be >= 1")
        if self.labeled_aug not in ("weak", "strong", "none"):
            raise ConfigError("train.labeled_aug must be 'weak', 'strong' or 'none'")
        if self.unsup_target not in ("distribution", "mode"):
            raise ConfigError("train.unsup_target must be 'distribution' or 'mode'")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    filter: FilterPolicy = field(default_factory=FilterPolicy)
    out_dir: str = "runs/default"


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = {"data": DataConfig, "train": TrainConfig, "aug": AugConfig,
               "filter": FilterPolicy}.get(name) if cls is ExperimentConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value, name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(raw):
    return _build(ExperimentConfig, raw, "")


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
