"""Full training runs: data, model, schedule, optimizer, losses, logging.

A run is driven by a :class:`TrainConfig` and produces a
:class:`~rlrs.metrics.RunLog` sampled at the 1% checkpoint grid. The same
engine backs the CLI commands and the hyperparameter search objective.
All randomness is owned by two seeds: ``init_seed`` (parameters) and
``data_seed`` (corpus sampling and batch order), recorded independently.
"""
from __future__ import annotations

import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tape
from .data import TokenStream, batch_cycle, load_file, synthetic_corpus
from .errors import ConfigError, DivergenceError
from .losses import LossConfig, cross_entropy, load_balance_loss, total_loss, z_loss
from .metrics import LossCurve, N_CHECKPOINTS, RunLog, SpeedupResult, checkpoint_steps, mean_curve, speedup
from .model import ModelConfig, ParameterSet, forward, init_model, wrap_parameters
from .optimizer import AdamWState, PreLrUpdates, adamw_step, clip_gradients, update_magnitude
from .schedule import ComponentTag, RelativeRates, ScheduleSpec, lr_at


@dataclass(frozen=True)
class DataSpec:
    """Token source: a raw byte file or a seeded synthetic Markov corpus.

    For the synthetic source, ``seed`` fixes the chain (the "language")
    while the run's data seed drives the actual sampling, so runs with
    different data seeds see different text from the same distribution.
    """

    kind: str = "synthetic"  # "synthetic" | "file"
    path: str | None = None
    seed: int = 0
    length: int = 100_000
    order: int = 1
    vocab: int = 32

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "file"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'file', got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("data.path is required for a file source")
        if self.kind == "synthetic" and self.length <= 0:
            raise ConfigError(f"data.synthetic.length must be positive, got {self.length}")

    def build(self, data_seed: int) -> TokenStream:
        if self.kind == "file":
            return load_file(self.path)
        from .data import corpus_from_matrix, transition_matrix

        matrix = transition_matrix(self.seed, vocab=self.vocab, order=self.order)
        return corpus_from_matrix(
            matrix, self.order, self.length, seed=int(np.random.SeedSequence([self.seed, data_seed]).generate_state(1)[0]),
            source=f"synthetic(seed={self.seed}, order={self.order}, vocab={self.vocab}, data_seed={data_seed})",
        )


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    schedule: ScheduleSpec
    rates: RelativeRates
    loss: LossConfig = LossConfig()
    weight_decay: float = 0.1
    init_scale: float = 0.15
    batch_size: int = 8
    init_seed: int = 0
    data_seed: int = 0
    data: DataSpec = DataSpec()
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float | None = None
    run_id: str | None = None
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        wanted = set(self.model.components)
        got = set(self.rates.per_component)
        if wanted - got:
            missing = sorted(t.value for t in wanted - got)
            raise ConfigError(f"relative rates missing for component(s): {missing}")
        if self.schedule.total_steps < 100:
            raise ConfigError("schedule.total_steps must be >= 100 for 1% checkpoints")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.init_scale <= 0:
            raise ConfigError(f"train.init_scale must be > 0, got {self.init_scale}")

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.model.kind}-s{self.init_seed}-d{self.data_seed}"

    def train_tokens(self) -> int:
        return self.schedule.total_steps * self.batch_size * self.model.seq_len


def _batch_loss(cfg: TrainConfig, params: ParameterSet, inputs, targets):
    """Forward pass returning (loss Var, tape, param vars)."""
    tape = Tape()
    pvars = wrap_parameters(tape, params)
    logits, decisions = forward(pvars, cfg.model, inputs)
    ce = cross_entropy(logits, targets)
    if decisions:
        z = _mean_scalar([z_loss(d.logits) for d in decisions])
        lb = _mean_scalar([load_balance_loss(d, cfg.model.n_experts) for d in decisions])
        loss = total_loss(ce, z, lb, cfg.loss)
    else:
        loss = ce
    return loss, tape, pvars


def _mean_scalar(vals):
    out = vals[0]
    for v in vals[1:]:
        out = ad.add(out, v)
    return ad.mul(out, 1.0 / len(vals)) if len(vals) > 1 else out


def train(cfg: TrainConfig, on_checkpoint: Callable[[int, float], None] | None = None) -> RunLog:
    """Run the full schedule and return the completed log.

    Raises :class:`DivergenceError` (with the partial log attached) the
    moment a non-finite loss or gradient appears.
    """
    # the matrices here are far below BLAS's parallel break-even point
    with threadpool_limits(limits=1):
        return _train_serial(cfg, on_checkpoint)


def _train_serial(cfg: TrainConfig, on_checkpoint: Callable[[int, float], None] | None) -> RunLog:
    from .config import train_config_to_keys  # local import to avoid a cycle

    stream = cfg.data.build(cfg.data_seed)
    if stream.vocab_size > cfg.model.vocab_size:
        raise ConfigError(
            f"data vocabulary ({stream.vocab_size}) exceeds model vocabulary ({cfg.model.vocab_size})"
        )
    params = init_model(cfg.model, cfg.init_scale, cfg.init_seed)
    state = AdamWState.init(
        params, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon, weight_decay=cfg.weight_decay
    )
    total = cfg.schedule.total_steps
    steps_at = checkpoint_steps(total)
    tags = list(cfg.model.components)

    curve = np.empty(N_CHECKPOINTS)
    lr_trace = {t: np.empty(N_CHECKPOINTS) for t in tags}
    norm_trace = {t: np.zeros(N_CHECKPOINTS) for t in tags}
    wall = np.zeros(N_CHECKPOINTS)
    started = time.perf_counter()

    batch_iter = batch_cycle(stream, cfg.batch_size, cfg.model.seq_len, cfg.data_seed)
    first = next(batch_iter)
    batch_iter = itertools.chain([first], batch_iter)

    # Checkpoint 0: pre-training loss on the first batch, rates at step 0.
    try:
        loss0, _, _ = _batch_loss(cfg, params, *first)
    except FloatingPointError:
        raise DivergenceError(0) from None
    curve[0] = float(loss0.value)
    if not np.isfinite(curve[0]):
        raise DivergenceError(0)
    for t in tags:
        lr_trace[t][0] = lr_at(cfg.schedule, cfg.rates, t, 0)
    wall[0] = time.perf_counter() - started

    def partial(k_done: int) -> dict:
        return {
            "run_id": cfg.resolved_run_id,
            "completed_checkpoints": k_done + 1,
            "curve": curve[: k_done + 1].tolist(),
            "steps": steps_at[: k_done + 1],
            "lr_trace": {t.value: lr_trace[t][: k_done + 1].tolist() for t in tags},
            "update_norm_trace": {t.value: norm_trace[t][: k_done + 1].tolist() for t in tags},
        }

    next_k = 1
    window: list[float] = []
    last_norms: dict[str, float] = {}
    for step in range(1, total + 1):
        inputs, targets = next(batch_iter)
        try:
            loss, tape, pvars = _batch_loss(cfg, params, inputs, targets)
        except FloatingPointError:
            raise DivergenceError(step, partial(next_k - 1), last_norms) from None
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise DivergenceError(step, partial(next_k - 1), last_norms)
        grads = ad.gradients(tape, loss, pvars)
        if cfg.grad_clip is not None:
            grads = clip_gradients(grads, cfg.grad_clip)
        lrs = {t: lr_at(cfg.schedule, cfg.rates, t, step) for t in tags}
        try:
            updates = adamw_step(state, params, grads, lrs)
        except FloatingPointError:
            raise DivergenceError(step, partial(next_k - 1), last_norms) from None
        window.append(loss_val)
        if step == steps_at[next_k]:
            curve[next_k] = float(np.mean(window))
            window.clear()
            last_norms = {}
            for t in tags:
                lr_trace[t][next_k] = lrs[t]
                norm_trace[t][next_k] = update_magnitude(updates, t)
                last_norms[t.value] = norm_trace[t][next_k]
            wall[next_k] = time.perf_counter() - started
            if on_checkpoint is not None:
                on_checkpoint(next_k, curve[next_k])
            next_k += 1

    return RunLog(
        run_id=cfg.resolved_run_id,
        config=train_config_to_keys(cfg),
        init_seed=cfg.init_seed,
        data_seed=cfg.data_seed,
        curve=LossCurve(total, curve),
        lr_trace=lr_trace,
        update_norm_trace=norm_trace,
        wall_clock=wall,
    )


# ---------------------------------------------------------------------------
# Arm comparison


@dataclass
class CompareReport:
    base_logs: list[RunLog]
    rlrs_logs: list[RunLog]
    base_mean: LossCurve
    rlrs_mean: LossCurve
    result: SpeedupResult
    seeds: list[int]
    base_cfg: TrainConfig
    rlrs_cfg: TrainConfig

    def as_dict(self) -> dict:
        def row(cfg: TrainConfig, sp: SpeedupResult | None) -> dict:
            return {
                "lr_type": "relative" if sp is not None else "baseline",
                "base_lr": cfg.schedule.eta_base,
                "train_tokens": cfg.train_tokens(),
                "speedup_percent": (None if sp is None or not sp.reached else sp.percent),
                "speedup_reached": None if sp is None else sp.reached,
            }

        return {
            "type": f"{self.base_cfg.model.kind}(d={self.base_cfg.model.d_model}, "
                    f"layers={self.base_cfg.model.n_layers})",
            "seeds": self.seeds,
            "rows": [row(self.base_cfg, None), row(self.rlrs_cfg, self.result)],
            "base_final_loss": self.base_mean.final_loss,
            "rlrs_final_loss": self.rlrs_mean.final_loss,
            "per_seed_final_loss": {
                "base": {str(s): log.curve.final_loss for s, log in zip(self.seeds, self.base_logs)},
                "rlrs": {str(s): log.curve.final_loss for s, log in zip(self.seeds, self.rlrs_logs)},
            },
            "speedup": str(self.result),
        }


def _comparable(a: TrainConfig, b: TrainConfig) -> bool:
    """True when configs differ at most in rates and base/final LR."""

    def neutralize(c: TrainConfig) -> TrainConfig:
        return replace(
            c,
            rates=RelativeRates.identity(c.model.components),
            schedule=replace(c.schedule, eta_base=1.0, alpha_end=1.0),
            run_id=None,
            provenance={},
        )

    return neutralize(a) == neutralize(b)


def compare(
    cfg_base: TrainConfig,
    cfg_rlrs: TrainConfig,
    seeds: Sequence[int],
    jobs: int = 1,
    train_fn: Callable[[TrainConfig], RunLog] | None = None,
) -> CompareReport:
    """Train both arms on matched data seeds and measure the speedup."""
    if not seeds:
        raise ConfigError("compare needs at least one data seed")
    if not _comparable(cfg_base, cfg_rlrs):
        raise ConfigError("compare arms may differ only in relative rates and base/final LR")
    configs = []
    for arm, cfg in (("base", cfg_base), ("rlrs", cfg_rlrs)):
        for s in seeds:
            configs.append(replace(cfg, data_seed=s, run_id=f"{arm}-d{s}"))
    logs = run_many(configs, jobs=jobs, train_fn=train_fn)
    n = len(seeds)
    base_logs, rlrs_logs = logs[:n], logs[n:]
    base_mean = mean_curve([log.curve for log in base_logs])
    rlrs_mean = mean_curve([log.curve for log in rlrs_logs])
    return CompareReport(
        base_logs=base_logs,
        rlrs_logs=rlrs_logs,
        base_mean=base_mean,
        rlrs_mean=rlrs_mean,
        result=speedup(base_mean, rlrs_mean),
        seeds=list(seeds),
        base_cfg=cfg_base,
        rlrs_cfg=cfg_rlrs,
    )


def run_many(
    configs: Sequence[TrainConfig],
    jobs: int = 1,
    train_fn: Callable[[TrainConfig], RunLog] | None = None,
) -> list[RunLog]:
    """Train several independent configs, optionally in parallel processes."""
    runner = train_fn or train
    if jobs > 1 and train_fn is None and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(train, configs))
    return [runner(c) for c in configs]


# ---------------------------------------------------------------------------
# Search objective plumbing


def apply_overrides(cfg: TrainConfig, overrides: Mapping[str, float]) -> TrainConfig:
    """Apply a search result's flat keys onto a config."""
    rates = cfg.rates
    schedule = cfg.schedule
    scalars: dict[str, float] = {}
    for key, value in overrides.items():
        if key.startswith("rlrs."):
            _, tag_name, which = key.split(".")
            tag = ComponentTag(tag_name)
            pair = rates.pair(tag)
            pair = pair._replace(**{which: float(value)})
            rates = rates.replaced(tag, pair)
        elif key == "schedule.eta_base":
            schedule = replace(schedule, eta_base=float(value))
        elif key == "schedule.alpha_end":
            schedule = replace(schedule, alpha_end=float(value))
        elif key in ("weight_decay", "init_scale"):
            scalars[key] = float(value)
        else:
            raise ConfigError(f"unknown override key {key!r}")
    return replace(cfg, rates=rates, schedule=schedule, **scalars)


def search_objective(
    cfg: TrainConfig, seeds: Sequence[int], jobs: int = 1
) -> Callable[[Mapping[str, float]], "Evaluation"]:
    """Objective for the tuner: mean final-checkpoint loss over seeds.

    A diverged run makes the whole configuration count as +inf.
    """
    from .search import Evaluation

    def evaluate(overrides: Mapping[str, float]) -> Evaluation:
        candidate = apply_overrides(cfg, overrides)
        configs = [replace(candidate, data_seed=s, run_id=f"tune-d{s}") for s in seeds]
        try:
            logs = run_many(configs, jobs=jobs)
        except DivergenceError:
            return Evaluation(objective=float("inf"))
        return Evaluation(
            objective=float(np.mean([log.curve.final_loss for log in logs])), logs=logs
        )

    return evaluate


def base_lr_objective(
    cfg: TrainConfig, seeds: Sequence[int], jobs: int = 1
) -> Callable[[float], "Evaluation"]:
    """Objective for the base-LR grid: mean final loss at a given eta_base."""
    inner = search_objective(cfg, seeds, jobs=jobs)

    def evaluate(eta_base: float) -> "Evaluation":
        return inner({"schedule.eta_base": eta_base})

    return evaluate
