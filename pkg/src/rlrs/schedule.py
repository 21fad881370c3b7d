"""Per-component cosine learning rate schedules with linear warmup.

Every transformer component (embedding, attention, ...) follows its own
warmup + cosine schedule. All schedules share one base: a peak rate
``eta_base`` and a final fraction ``alpha_end``. A component's schedule is
obtained by scaling the base peak by ``start`` and the base final rate by
``end`` from its :class:`RatePair`.

Schedules are pure functions of the step, so any step can be queried out
of order and from any thread.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, NamedTuple

from .errors import ConfigError


class ComponentTag(Enum):
    """Parameter groups that carry their own learning rate schedule."""

    EMBEDDING = "embedding"
    ATTENTION = "attention"
    FEED_FORWARD = "feed_forward"
    ROUTER = "router"
    EXPERTS = "experts"
    UNEMBEDDING = "unembedding"

    def __repr__(self) -> str:
        return f"ComponentTag.{self.name}"


# Canonical orderings; dense and MoE models each use exactly one of these sets.
DENSE_COMPONENTS: tuple[ComponentTag, ...] = (
    ComponentTag.EMBEDDING,
    ComponentTag.ATTENTION,
    ComponentTag.FEED_FORWARD,
    ComponentTag.UNEMBEDDING,
)
MOE_COMPONENTS: tuple[ComponentTag, ...] = (
    ComponentTag.EMBEDDING,
    ComponentTag.ATTENTION,
    ComponentTag.ROUTER,
    ComponentTag.EXPERTS,
    ComponentTag.UNEMBEDDING,
)


def schedule_set(kind: str) -> tuple[ComponentTag, ...]:
    """Active component set for a model kind ("dense" or "moe")."""
    if kind == "dense":
        return DENSE_COMPONENTS
    if kind == "moe":
        return MOE_COMPONENTS
    raise ConfigError(f"unknown model kind {kind!r}, expected 'dense' or 'moe'")


class RatePair(NamedTuple):
    """Multipliers applied to the base peak rate (start) and final rate (end)."""

    start: float
    end: float


@dataclass(frozen=True)
class ScheduleSpec:
    """Base cosine schedule shared by all components.

    ``eta_base`` is the peak rate, ``alpha_end`` the fraction of it reached
    at the last step, ``warmup_fraction`` the share of steps spent ramping
    linearly from zero.
    """

    eta_base: float
    alpha_end: float
    warmup_fraction: float = 0.01
    total_steps: int = 10_000

    def __post_init__(self) -> None:
        if not (isinstance(self.total_steps, int) and self.total_steps > 0):
            raise ConfigError(f"schedule.total_steps must be a positive integer, got {self.total_steps!r}")
        if not (math.isfinite(self.eta_base) and self.eta_base > 0):
            raise ConfigError(f"schedule.eta_base must be > 0, got {self.eta_base!r}")
        if not (math.isfinite(self.alpha_end) and 0 < self.alpha_end <= 1):
            raise ConfigError(f"schedule.alpha_end must be in (0, 1], got {self.alpha_end!r}")
        if not (0 <= self.warmup_fraction < 1):
            raise ConfigError(f"schedule.warmup_fraction must be in [0, 1), got {self.warmup_fraction!r}")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup ({self.warmup_steps} steps) must end before total_steps ({self.total_steps})"
            )

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.total_steps)


@dataclass(frozen=True)
class RelativeRates:
    """Per-component (start, end) multipliers on the base schedule.

    A multiplier of 0 is permitted so a component can be frozen outright.
    """

    per_component: Mapping[ComponentTag, RatePair]

    def __post_init__(self) -> None:
        clean: dict[ComponentTag, RatePair] = {}
        for tag, pair in self.per_component.items():
            if not isinstance(tag, ComponentTag):
                raise ConfigError(f"rate key {tag!r} is not a ComponentTag")
            pair = RatePair(float(pair[0]), float(pair[1]))
            if not (math.isfinite(pair.start) and pair.start >= 0):
                raise ConfigError(f"rlrs.{tag.value}.start must be >= 0, got {pair.start!r}")
            if not (math.isfinite(pair.end) and pair.end >= 0):
                raise ConfigError(f"rlrs.{tag.value}.end must be >= 0, got {pair.end!r}")
            clean[tag] = pair
        object.__setattr__(self, "per_component", clean)

    def pair(self, tag: ComponentTag) -> RatePair:
        try:
            return self.per_component[tag]
        except KeyError:
            raise ConfigError(f"no relative rates configured for component {tag.value!r}") from None

    @property
    def components(self) -> tuple[ComponentTag, ...]:
        return tuple(self.per_component)

    @classmethod
    def identity(cls, components: Iterable[ComponentTag]) -> "RelativeRates":
        """Every component at (1, 1): plain shared cosine schedule."""
        return cls({tag: RatePair(1.0, 1.0) for tag in components})

    def scaled(self, factor: float) -> "RelativeRates":
        """All multipliers scaled by ``factor`` (used by base-LR refactoring tests)."""
        return RelativeRates(
            {tag: RatePair(p.start * factor, p.end * factor) for tag, p in self.per_component.items()}
        )

    def replaced(self, tag: ComponentTag, pair: RatePair) -> "RelativeRates":
        updated = dict(self.per_component)
        updated[tag] = pair
        return RelativeRates(updated)


def endpoint_lrs(spec: ScheduleSpec, rates: RelativeRates, tag: ComponentTag) -> tuple[float, float]:
    """Peak and final learning rate for one component.

    Peak is ``eta_base * start``; final is ``eta_base * alpha_end * end``.
    """
    pair = rates.pair(tag)
    return spec.eta_base * pair.start, spec.eta_base * spec.alpha_end * pair.end


def lr_at(spec: ScheduleSpec, rates: RelativeRates, tag: ComponentTag, step: int) -> float:
    """Learning rate of ``tag`` at ``step``.

    Linear ramp from 0 to the component peak over the warmup steps, then a
    cosine from the peak down to the component final rate over the
    remaining steps. Continuous at the warmup boundary and attains both
    endpoints exactly.
    """
    if not 0 <= step <= spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    eta_start, eta_end = endpoint_lrs(spec, rates, tag)
    warmup = spec.warmup_steps
    if step < warmup:
        return eta_start * step / warmup
    progress = (step - warmup) / (spec.total_steps - warmup)
    return eta_end + 0.5 * (eta_start - eta_end) * (1.0 + math.cos(math.pi * progress))


def lr_by_tag(spec: ScheduleSpec, rates: RelativeRates, step: int) -> dict[ComponentTag, float]:
    """All configured components' rates at one step."""
    return {tag: lr_at(spec, rates, tag, step) for tag in rates.per_component}


def preset(kind: str) -> RelativeRates:
    """Shipped relative-rate tables for MoE and dense models.

    These were tuned on a small model and transfer to larger ones; the
    embedding start value is the one knob known to want an increase with
    model width, so override it when scaling up.
    """
    if kind == "moe":
        return RelativeRates(
            {
                ComponentTag.EMBEDDING: RatePair(5.0, 0.6),
                ComponentTag.ATTENTION: RatePair(1.0, 1.0),
                ComponentTag.ROUTER: RatePair(0.6, 1.0),
                ComponentTag.EXPERTS: RatePair(0.3, 1.125),
                ComponentTag.UNEMBEDDING: RatePair(0.6, 0.4),
            }
        )
    if kind == "dense":
        return RelativeRates(
            {
                ComponentTag.EMBEDDING: RatePair(5.0, 0.6),
                ComponentTag.ATTENTION: RatePair(1.0, 0.2),
                ComponentTag.FEED_FORWARD: RatePair(1.0, 0.6),
                ComponentTag.UNEMBEDDING: RatePair(1.0, 0.4),
            }
        )
    raise ConfigError(f"unknown preset kind {kind!r}, expected 'dense' or 'moe'")
