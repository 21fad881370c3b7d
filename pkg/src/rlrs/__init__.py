"""Decoupled per-component learning rate schedules for small transformers.

The package trains byte- or synthetic-corpus language models whose
parameter groups (embedding, attention, router, experts, ...) each follow
their own warmup + cosine schedule, and ships the tooling around that
idea: a local-search tuner, a small-to-large transfer step, and a
crossing-based speedup metric.
"""

from .errors import ConfigError, DivergenceError
from .losses import LossConfig
from .metrics import LossCurve, RunLog, SpeedupResult, mean_curve, speedup
from .model import ModelConfig, ParameterSet, init_model, tag_of
from .schedule import (
    ComponentTag,
    RatePair,
    RelativeRates,
    ScheduleSpec,
    endpoint_lrs,
    lr_at,
    preset,
)
from .trainer import DataSpec, TrainConfig, compare, train

__version__ = "0.1.0"

__all__ = [
    "ComponentTag",
    "ConfigError",
    "DataSpec",
    "DivergenceError",
    "LossConfig",
    "LossCurve",
    "ModelConfig",
    "ParameterSet",
    "RatePair",
    "RelativeRates",
    "RunLog",
    "ScheduleSpec",
    "SpeedupResult",
    "TrainConfig",
    "compare",
    "endpoint_lrs",
    "init_model",
    "lr_at",
    "mean_curve",
    "preset",
    "speedup",
    "tag_of",
    "train",
]
