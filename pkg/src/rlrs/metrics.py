"""Loss-curve recording, seed aggregation, the speedup metric, and export.

A run is sampled at 101 checkpoints: one per whole percent of the step
budget. The loss at checkpoint k is the mean training loss over the steps
since checkpoint k-1 (checkpoint 0 is the pre-training loss), which keeps
single-batch noise from dominating the crossing search in the speedup
metric. The same 101 checkpoints carry the per-component learning-rate and
update-magnitude traces.

The speedup of a candidate curve against a baseline is
``(T_base / T_candidate - 1) * 100`` where T_candidate is the step of the
first checkpoint at which the candidate's loss reaches the baseline's
final loss. The crossing is quantized to the 1% grid, and a candidate that
never reaches the target yields a distinguished not-reached result rather
than an error.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .schedule import ComponentTag

N_CHECKPOINTS = 101  # percent 0..100 inclusive


def checkpoint_steps(total_steps: int) -> list[int]:
    """Step index of each whole-percent checkpoint; strictly increasing."""
    if total_steps < 100:
        raise ValueError(f"need at least 100 steps for 1% checkpoints, got {total_steps}")
    return [round(p * total_steps / 100) for p in range(N_CHECKPOINTS)]


@dataclass(frozen=True)
class LossCurve:
    total_steps: int
    samples: np.ndarray  # 101 losses, percent 0..100

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.shape != (N_CHECKPOINTS,):
            raise ValueError(f"a loss curve has {N_CHECKPOINTS} samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("loss curve contains non-finite samples")
        checkpoint_steps(self.total_steps)  # validates total_steps

    @property
    def final_loss(self) -> float:
        return float(self.samples[-1])


@dataclass
class RunLog:
    """Everything recorded during one training run."""

    run_id: str
    config: dict[str, str]  # flat key/value echo of the full train config
    init_seed: int
    data_seed: int
    curve: LossCurve
    lr_trace: dict[ComponentTag, np.ndarray]
    update_norm_trace: dict[ComponentTag, np.ndarray]
    wall_clock: np.ndarray  # seconds since run start, per checkpoint

    def __post_init__(self) -> None:
        for name, traces in (("lr", self.lr_trace), ("update norm", self.update_norm_trace)):
            for tag, arr in traces.items():
                if arr.shape != (N_CHECKPOINTS,):
                    raise ValueError(f"{name} trace for {tag.value} has shape {arr.shape}")

    @property
    def active_tags(self) -> list[ComponentTag]:
        return [t for t in ComponentTag if t in self.lr_trace]


def mean_curve(curves: Sequence[LossCurve]) -> LossCurve:
    """Pointwise arithmetic mean; all curves must share the step budget."""
    if not curves:
        raise ValueError("mean_curve needs at least one curve")
    budgets = {c.total_steps for c in curves}
    if len(budgets) > 1:
        raise ValueError(f"curves disagree on total_steps: {sorted(budgets)}")
    stacked = np.stack([c.samples for c in curves])
    return LossCurve(curves[0].total_steps, stacked.mean(axis=0))


@dataclass(frozen=True)
class SpeedupResult:
    reached: bool
    percent: float | None          # speedup percentage; None when not reached
    baseline_final_loss: float
    t_base: int
    t_candidate: int | None        # step of the first crossing checkpoint
    crossing_percent: int | None   # checkpoint index of the crossing

    def __str__(self) -> str:
        if not self.reached:
            return f"no speedup measurable (never reached baseline final loss {self.baseline_final_loss:.6g})"
        return f"{self.percent:+.2f}% (crossed at step {self.t_candidate} of {self.t_base})"


def speedup(base: LossCurve, candidate: LossCurve) -> SpeedupResult:
    """Steps saved by ``candidate`` in reaching the baseline's final loss."""
    target = base.final_loss
    steps = checkpoint_steps(candidate.total_steps)
    below = np.flatnonzero(candidate.samples <= target)
    if below.size == 0:
        return SpeedupResult(False, None, target, base.total_steps, None, None)
    k = int(below[0])
    t_candidate = steps[k]
    if t_candidate == 0:
        percent = math.inf  # already at the target before training
    else:
        percent = (base.total_steps / t_candidate - 1.0) * 100.0
    return SpeedupResult(True, percent, target, base.total_steps, t_candidate, k)


# ---------------------------------------------------------------------------
# Export
#
# <run_id>.curve.csv : percent, step, loss, lr_<tag>..., updnorm_<tag>...
# <run_id>.meta.json : config echo, seeds, final loss
# Both are byte-stable for identical logs; wall-clock stays out of them and
# is only carried on the RunLog object.


def _fmt(x: float) -> str:
    return repr(float(x))


def export(log: RunLog, out_dir) -> tuple[str, str]:
    """Write the curve CSV and metadata JSON; returns the two paths."""
    os.makedirs(out_dir, exist_ok=True)
    tags = log.active_tags
    csv_path = os.path.join(out_dir, f"{log.run_id}.curve.csv")
    meta_path = os.path.join(out_dir, f"{log.run_id}.meta.json")

    steps = checkpoint_steps(log.curve.total_steps)
    header = ["percent", "step", "loss"]
    header += [f"lr_{t.value}" for t in tags]
    header += [f"updnorm_{t.value}" for t in tags]
    lines = [",".join(header)]
    for k in range(N_CHECKPOINTS):
        row = [str(k), str(steps[k]), _fmt(log.curve.samples[k])]
        row += [_fmt(log.lr_trace[t][k]) for t in tags]
        row += [_fmt(log.update_norm_trace[t][k]) for t in tags]
        lines.append(",".join(row))
    with open(csv_path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")

    meta = {
        "run_id": log.run_id,
        "config": dict(sorted(log.config.items())),
        "init_seed": log.init_seed,
        "data_seed": log.data_seed,
        "total_steps": log.curve.total_steps,
        "final_loss": log.curve.final_loss,
        "components": [t.value for t in tags],
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, meta_path
