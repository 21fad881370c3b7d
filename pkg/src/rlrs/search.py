"""Greedy multiplicative local search and the small-to-large transfer step.

The tuner sweeps an ordered list of hyperparameters; for each it tries
scaling the current value by a fixed factor set and keeps the first strict
improvement. Whenever a full sweep changes anything, the sweep restarts;
the search stops on a clean sweep or when the evaluation budget runs out.
Every distinct configuration is evaluated once and cached, and each
evaluation is appended to an audit trail so a run can be replayed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

from .errors import ConfigError, DivergenceError
from .schedule import ComponentTag, RatePair, RelativeRates
from .trainer import TrainConfig

# Trial order puts the gentle factors first; the first improving factor wins.
FACTORS = (2 / 3, 3 / 2, 1 / 5, 5.0)


@dataclass(frozen=True)
class SearchSpace:
    """Ordered multiplicative hyperparameters with their starting values."""

    entries: tuple[tuple[str, float], ...]
    mode: str = "rlrs"  # or "baseline"

    def __post_init__(self) -> None:
        if self.mode not in ("rlrs", "baseline"):
            raise ConfigError(f"unknown search mode {self.mode!r}")
        for name, value in self.entries:
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"search entry {name!r} must start positive, got {value!r}")

    def initial(self) -> dict[str, float]:
        return dict(self.entries)


def rlrs_space(rates: RelativeRates, weight_decay: float, init_scale: float) -> SearchSpace:
    """Relative-rate tuning space: start multipliers in tag order, then end
    multipliers, then weight decay and init scale."""
    entries = [(f"rlrs.{t.value}.start", rates.pair(t).start) for t in ComponentTag if t in rates.per_component]
    entries += [(f"rlrs.{t.value}.end", rates.pair(t).end) for t in ComponentTag if t in rates.per_component]
    entries += [("weight_decay", weight_decay), ("init_scale", init_scale)]
    return SearchSpace(tuple(entries), mode="rlrs")


def baseline_space(eta_base: float, alpha_end: float, weight_decay: float, init_scale: float) -> SearchSpace:
    """Baseline tuning space: the schedule's own start and end rates plus
    weight decay and init scale."""
    entries = (
        ("schedule.eta_base", eta_base),
        ("schedule.alpha_end", alpha_end),
        ("weight_decay", weight_decay),
        ("init_scale", init_scale),
    )
    return SearchSpace(entries, mode="baseline")


@dataclass
class Evaluation:
    """Objective value of one configuration (lower is better)."""

    objective: float
    logs: list = field(default_factory=list)


@dataclass
class TrialRecord:
    config: dict[str, float]
    objective: float
    accepted: bool
    cached: bool = False
    failed: bool = False

    def as_json(self) -> str:
        return json.dumps(
            {
                "config": {k: self.config[k] for k in sorted(self.config)},
                "objective": self.objective if math.isfinite(self.objective) else "inf",
                "accepted": self.accepted,
                "cached": self.cached,
                "failed": self.failed,
            },
            sort_keys=True,
        )


@dataclass
class SearchResult:
    best: dict[str, float]
    objective: float
    evaluations_used: int
    converged: bool  # a full sweep made no change
    trail: list[TrialRecord]


def _config_key(config: Mapping[str, float]) -> tuple:
    return tuple((k, config[k]) for k in sorted(config))


def local_search(
    space: SearchSpace,
    evaluate: Callable[[Mapping[str, float]], Evaluation],
    budget: int,
) -> SearchResult:
    """Coordinate-wise multiplicative descent over ``space``.

    ``budget`` caps the number of true evaluations (cache hits are free).
    A failed evaluation counts as +inf and is recorded, never raised.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    cache: dict[tuple, float] = {}
    trail: list[TrialRecord] = []
    used = 0

    def measure(config: Mapping[str, float], accepted: bool = False) -> tuple[float, bool]:
        """Returns (objective, out_of_budget)."""
        nonlocal used
        key = _config_key(config)
        if key in cache:
            trail.append(TrialRecord(dict(config), cache[key], accepted, cached=True))
            return cache[key], False
        if used >= budget:
            return math.inf, True
        used += 1
        failed = False
        try:
            objective = float(evaluate(config).objective)
            if math.isnan(objective):
                objective, failed = math.inf, True
        except (ArithmeticError, DivergenceError):
            objective, failed = math.inf, True
        cache[key] = objective
        trail.append(TrialRecord(dict(config), objective, accepted, failed=failed))
        return objective, False

    current = space.initial()
    best_objective, out = measure(current)
    converged = False
    while not out:
        changed = False
        for name, _ in space.entries:
            improved = False
            for factor in FACTORS:
                candidate = dict(current)
                candidate[name] = current[name] * factor
                objective, out = measure(candidate)
                if out:
                    break
                if objective < best_objective:
                    current = candidate
                    best_objective = objective
                    trail[-1].accepted = True
                    changed = improved = True
                    break  # first strict improvement wins
            if out:
                break
        if out:
            break
        if not changed:
            converged = True
            break
    return SearchResult(current, best_objective, used, converged, trail)


def write_trail(trail: Sequence[TrialRecord], path) -> None:
    """Line-delimited JSON audit trail, one record per evaluation."""
    with open(path, "w") as fh:
        for record in trail:
            fh.write(record.as_json() + "\n")


# ---------------------------------------------------------------------------
# Base learning rate grid


def lr_grid(exponents: Sequence[int]) -> list[float]:
    """The {1e-n, 2e-n, 5e-n} grid over the given exponents, ascending."""
    points = sorted(m * 10.0**-n for n in exponents for m in (1, 2, 5))
    if not points:
        raise ConfigError("empty learning-rate grid")
    return points


def tune_base_lr(
    grid_exponents: Sequence[int],
    evaluate: Callable[[float], Evaluation],
) -> tuple[float, list[TrialRecord]]:
    """Pick the grid learning rate with the lowest objective.

    Ties go to the smaller rate (stability bias). Raises if every point
    diverges.
    """
    best_lr, best_objective = None, math.inf
    trail: list[TrialRecord] = []
    for lr in lr_grid(grid_exponents):
        try:
            objective = float(evaluate(lr).objective)
            failed = math.isnan(objective)
        except (ArithmeticError, DivergenceError):
            objective, failed = math.inf, True
        if failed:
            objective = math.inf
        trail.append(TrialRecord({"schedule.eta_base": lr}, objective, False, failed=failed))
        if objective < best_objective:  # strict: earlier (smaller) lr wins ties
            best_lr, best_objective = lr, objective
    if best_lr is None or not math.isfinite(best_objective):
        raise ConfigError("every learning rate in the grid diverged")
    for record in trail:
        record.accepted = record.config["schedule.eta_base"] == best_lr
    return best_lr, trail


# ---------------------------------------------------------------------------
# Small-to-large transfer


def transfer(small_rates: RelativeRates, large: TrainConfig, provenance: Mapping | None = None) -> TrainConfig:
    """Reuse relative rates tuned on a small model in a large model's config.

    The multipliers are copied verbatim; the base learning rate is left for
    grid tuning on the large model. The component sets must match (a dense
    tuning result cannot seed an MoE model or vice versa).
    """
    wanted = set(large.model.components)
    got = set(small_rates.per_component)
    if wanted != got:
        raise ConfigError(
            "component sets differ: tuned "
            f"{sorted(t.value for t in got)} vs target {sorted(t.value for t in wanted)}"
        )
    note = {"transferred_rates": {t.value: list(small_rates.pair(t)) for t in small_rates.per_component}}
    if provenance:
        note.update(provenance)
    return replace(large, rates=small_rates, provenance={**large.provenance, **note})


def rates_from_search(best: Mapping[str, float], components: Sequence[ComponentTag]) -> RelativeRates:
    """Extract a RelativeRates from a search result's flat key space."""
    pairs = {}
    for tag in components:
        try:
            pairs[tag] = RatePair(best[f"rlrs.{tag.value}.start"], best[f"rlrs.{tag.value}.end"])
        except KeyError as exc:
            raise ConfigError(f"search result is missing key {exc.args[0]!r}") from None
    return RelativeRates(pairs)
