"""Experiment configuration: nested dataclasses loaded from a single JSON document.

Unknown keys are rejected so that typos fail before any training starts.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import DATASET_KINDS
from .schedules import SCHEDULE_KINDS, VARIANCE_KINDS

SAMPLER_KINDS = ("uniform", "min_snr", "p2", "log_normal", "adaptive", "variance_proportional")
SEED_ENV = "TIMESTEP_LAB_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "gauss_mix"
    n: int = 25600
    seed: int = 1234
    params: dict = field(default_factory=dict)


@dataclass
class ScheduleSpec:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "fixed_large"


@dataclass
class PredictorSpec:
    hidden_dims: list = field(default_factory=lambda: [128, 128])
    time_embed_dim: int = 64
    activation: str = "silu"


@dataclass
class SamplerSpec:
    kind: str = "uniform"
    # min_snr / p2 act as a loss multiplier or, converted, as a sampling distribution
    role: str = "loss_weight"
    min_snr_gamma: float = 5.0
    p2_k: float = 1.0
    p2_gamma: float = 0.0
    lognormal_mu: float = 0.0
    lognormal_sigma: float = 1.0
    varprop_refresh: int = 2000
    varprop_grid: int = 50
    varprop_n: int = 64


@dataclass
class OptimizerSpec:
    lr: float = 2e-4
    batch_size: int = 128
    clip: float = 1.0
    ema_decay: float = 0.9999


@dataclass
class AdaptiveSpec:
    lr: float = None
    ent_coef: float = 1e-2
    f_s: int = 40
    a_floor: float = 1e-4
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    optimizer: str = "sgd"
    reward_window: int = 100
    init_ab: float = 1.0

    def resolved_lr(self, schedule_kind):
        if self.lr is not None:
            return self.lr
        return 1e-3 if schedule_kind == "cosine" else 1e-2


@dataclass
class DeltaSpec:
    queue_capacity: int = 20
    subset_size: int = 3
    weighted: bool = True
    fallback: str = "quartiles"
    fidelity_check: bool = False
    fidelity_rows: int = 32


@dataclass
class EvalSpec:
    every: int = 500
    probe_size: int = 64
    n_generate: int = 0
    n_reference: int = 2000


@dataclass
class ExperimentConfig:
    seed: int = 0
    K: int = 30000
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    adaptive: AdaptiveSpec = field(default_factory=AdaptiveSpec)
    delta: DeltaSpec = field(default_factory=DeltaSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = None
    checkpoint_every: int = 0

    def validate(self):
        checks = [
            (self.K >= 1, f"K must be >= 1, got {self.K}"),
            (self.dataset.kind in DATASET_KINDS, f"unknown dataset.kind {self.dataset.kind!r}"),
            (self.dataset.n >= 1, "dataset.n must be >= 1"),
            (self.schedule.kind in SCHEDULE_KINDS, f"unknown schedule.kind {self.schedule.kind!r}"),
            (self.schedule.variance in VARIANCE_KINDS, f"unknown schedule.variance {self.schedule.variance!r}"),
            (self.predictor.activation in ("relu", "silu"), f"unknown predictor.activation {self.predictor.activation!r}"),
            (self.predictor.time_embed_dim % 2 == 0, "predictor.time_embed_dim must be even"),
            (self.sampler.kind in SAMPLER_KINDS, f"unknown sampler.kind {self.sampler.kind!r}"),
            (self.sampler.role in ("loss_weight", "sampling_prob"), f"unknown sampler.role {self.sampler.role!r}"),
            (self.optimizer.batch_size >= 1, "optimizer.batch_size must be >= 1"),
            (self.adaptive.f_s >= 1, "adaptive.f_s must be >= 1"),
            (self.adaptive.optimizer in ("sgd", "adam"), f"unknown adaptive.optimizer {self.adaptive.optimizer!r}"),
            (self.adaptive.a_floor > 0, "adaptive.a_floor must be positive"),
            (self.delta.queue_capacity >= 1, "delta.queue_capacity must be >= 1"),
            (1 <= self.delta.subset_size <= self.schedule.T, "delta.subset_size must lie in 1..T"),
            (self.delta.fallback in ("quartiles", "skip"), f"unknown delta.fallback {self.delta.fallback!r}"),
            (self.eval.every >= 0 and self.eval.probe_size >= 1, "eval.every must be >= 0 and eval.probe_size >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetSpec,
    (ExperimentConfig, "schedule"): ScheduleSpec,
    (ExperimentConfig, "predictor"): PredictorSpec,
    (ExperimentConfig, "sampler"): SamplerSpec,
    (ExperimentConfig, "optimizer"): OptimizerSpec,
    (ExperimentConfig, "adaptive"): AdaptiveSpec,
    (ExperimentConfig, "delta"): DeltaSpec,
    (ExperimentConfig, "eval"): EvalSpec,
}


def config_from_dict(data):
    """Build and validate a config; ``TIMESTEP_LAB_SEED`` in the environment overrides ``seed``."""
    cfg = _build(ExperimentConfig, data, "")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    return cfg.validate()


def load_config(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
