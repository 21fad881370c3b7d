"""Flat dotted-key config files: ``section.key = value``, one per line.

The format is deliberately trivial: ``#`` starts a comment, blank lines
are ignored, values are plain tokens. It diffs cleanly and parses the
same way in any language.
"""
from __future__ import annotations

import math
from typing import Mapping

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .schedule import ComponentTag, RatePair, RelativeRates, ScheduleSpec, schedule_set
from .trainer import DataSpec, TrainConfig


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat key/value lines into a dict, preserving raw value strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read(), source=str(path))


def format_config(keys: Mapping[str, object]) -> str:
    return "\n".join(f"{k} = {_fmt_value(v)}" for k, v in keys.items()) + "\n"


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


_REQUIRED = object()


class _Keys:
    """Typed accessors over the flat dict; errors name the offending key."""

    def __init__(self, raw: Mapping[str, str]):
        self.raw = dict(raw)
        self.seen: set[str] = set()

    def _get(self, key: str, default):
        self.seen.add(key)
        if key not in self.raw:
            if default is _REQUIRED:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        return self.raw[key]

    def text(self, key: str, default=None) -> str | None:
        return self._get(key, default)

    def floating(self, key: str, default=_REQUIRED):
        value = self._get(key, default)
        if not isinstance(value, str):
            return value  # a non-string default passed through (e.g. None)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}") from None

    def integer(self, key: str, default=_REQUIRED):
        value = self._get(key, default)
        if not isinstance(value, str):
            return value
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}") from None

    def unknown_keys(self) -> list[str]:
        return sorted(set(self.raw) - self.seen)


def train_config_from_keys(raw: Mapping[str, str]) -> TrainConfig:
    """Build a full run config from flat keys, validating as it goes."""
    k = _Keys(raw)
    model = ModelConfig(
        d_model=k.integer("model.d_model"),
        n_layers=k.integer("model.n_layers"),
        n_heads=k.integer("model.n_heads", 4),
        ff_multiplier=k.floating("model.ff_multiplier", 8 / 3),
        n_experts=k.integer("model.n_experts", 0),
        vocab_size=k.integer("model.vocab_size"),
        seq_len=k.integer("model.seq_len"),
    )
    schedule = ScheduleSpec(
        eta_base=k.floating("schedule.eta_base"),
        alpha_end=k.floating("schedule.alpha_end"),
        warmup_fraction=k.floating("schedule.warmup_fraction", 0.01),
        total_steps=k.integer("schedule.total_steps"),
    )
    pairs: dict[ComponentTag, RatePair] = {}
    for tag in schedule_set(model.kind):
        start = k.floating(f"rlrs.{tag.value}.start", 1.0)
        end = k.floating(f"rlrs.{tag.value}.end", 1.0)
        pairs[tag] = RatePair(start, end)
    rates = RelativeRates(pairs)
    loss = LossConfig(
        z_loss_weight=k.floating("loss.z_loss_weight", 0.001),
        load_balance_weight=k.floating("loss.load_balance_weight", 0.01),
    )
    if k.text("data.path") is not None:
        data = DataSpec(kind="file", path=k.text("data.path"))
    else:
        data = DataSpec(
            kind="synthetic",
            seed=k.integer("data.synthetic.seed", 0),
            length=k.integer("data.synthetic.length", 100_000),
            order=k.integer("data.synthetic.order", 1),
            vocab=k.integer("data.synthetic.vocab", 32),
        )
    grad_clip = k.floating("train.grad_clip", None)
    cfg = TrainConfig(
        model=model,
        schedule=schedule,
        rates=rates,
        loss=loss,
        weight_decay=k.floating("train.weight_decay", 0.1),
        init_scale=k.floating("train.init_scale", 0.15),
        batch_size=k.integer("train.batch_size", 8),
        init_seed=k.integer("train.init_seed", 0),
        data_seed=k.integer("train.data_seed", 0),
        data=data,
        beta1=k.floating("train.beta1", 0.9),
        beta2=k.floating("train.beta2", 0.999),
        epsilon=k.floating("train.epsilon", 1e-8),
        grad_clip=grad_clip,
        run_id=k.text("train.run_id"),
    )
    unknown = k.unknown_keys()
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return cfg


def load_train_config(path) -> TrainConfig:
    return train_config_from_keys(load_config_file(path))


def train_config_to_keys(cfg: TrainConfig) -> dict[str, str]:
    """Flatten a config back to the file key space (canonical echo)."""
    keys: dict[str, object] = {
        "model.d_model": cfg.model.d_model,
        "model.n_layers": cfg.model.n_layers,
        "model.n_heads": cfg.model.n_heads,
        "model.ff_multiplier": cfg.model.ff_multiplier,
        "model.n_experts": cfg.model.n_experts,
        "model.vocab_size": cfg.model.vocab_size,
        "model.seq_len": cfg.model.seq_len,
        "schedule.eta_base": cfg.schedule.eta_base,
        "schedule.alpha_end": cfg.schedule.alpha_end,
        "schedule.warmup_fraction": cfg.schedule.warmup_fraction,
        "schedule.total_steps": cfg.schedule.total_steps,
    }
    for tag in cfg.model.components:
        pair = cfg.rates.pair(tag)
        keys[f"rlrs.{tag.value}.start"] = pair.start
        keys[f"rlrs.{tag.value}.end"] = pair.end
    keys["loss.z_loss_weight"] = cfg.loss.z_loss_weight
    keys["loss.load_balance_weight"] = cfg.loss.load_balance_weight
    if cfg.data.kind == "file":
        keys["data.path"] = cfg.data.path
    else:
        keys["data.synthetic.seed"] = cfg.data.seed
        keys["data.synthetic.length"] = cfg.data.length
        keys["data.synthetic.order"] = cfg.data.order
        keys["data.synthetic.vocab"] = cfg.data.vocab
    keys["train.weight_decay"] = cfg.weight_decay
    keys["train.init_scale"] = cfg.init_scale
    keys["train.batch_size"] = cfg.batch_size
    keys["train.init_seed"] = cfg.init_seed
    keys["train.data_seed"] = cfg.data_seed
    keys["train.beta1"] = cfg.beta1
    keys["train.beta2"] = cfg.beta2
    keys["train.epsilon"] = cfg.epsilon
    if cfg.grad_clip is not None:
        keys["train.grad_clip"] = cfg.grad_clip
    if cfg.run_id is not None:
        keys["train.run_id"] = cfg.run_id
    return {key: _fmt_value(v) for key, v in keys.items()}


def rates_to_config_text(rates: RelativeRates) -> str:
    """The relative-rate table alone, as config-file lines."""
    keys: dict[str, object] = {}
    for tag in ComponentTag:
        if tag in rates.per_component:
            pair = rates.pair(tag)
            keys[f"rlrs.{tag.value}.start"] = pair.start
            keys[f"rlrs.{tag.value}.end"] = pair.end
    return format_config(keys)
