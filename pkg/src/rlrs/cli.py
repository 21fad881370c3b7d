"""Command-line entry point for the experimental workflow.

Exit codes: 0 success, 1 configuration error, 2 divergence, 3 I/O error.
Set RLRS_LOG=info (or debug) for progress output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .config import (
    format_config,
    load_train_config,
    rates_to_config_text,
    train_config_to_keys,
)
from .errors import ConfigError, DivergenceError
from .metrics import export
from .schedule import ComponentTag, preset
from .search import (
    baseline_space,
    local_search,
    rates_from_search,
    rlrs_space,
    transfer,
    tune_base_lr,
    write_trail,
)
from .trainer import apply_overrides, base_lr_objective, compare, run_many, search_objective, train

log = logging.getLogger("rlrs")


class _Parser(argparse.ArgumentParser):
    # bad usage is a configuration error (exit 1), not argparse's default 2
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                lo, hi = hi, lo
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an exponent range like 2..4, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="rlrs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.init_seed")
    p.add_argument("--data-seed", type=int, default=None, help="override train.data_seed")

    p = sub.add_parser("tune", help="local-search hyperparameter tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("rlrs", "baseline"), required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0])
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("compare", help="baseline vs relative-rates speedup")
    p.add_argument("--base", required=True)
    p.add_argument("--rlrs", required=True)
    p.add_argument("--seeds", type=_seed_list, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("extrapolate", help="transfer tuned rates to a larger model")
    p.add_argument("--small-result", required=True, help="best config written by tune")
    p.add_argument("--large-config", required=True)
    p.add_argument("--grid", type=_grid_range, required=True, help="base-LR exponent range, e.g. 2..4")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0])
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("ablate", help="sweep one component's relative rate")
    p.add_argument("--config", required=True)
    p.add_argument("--component", required=True, choices=[t.value for t in ComponentTag])
    p.add_argument("--which", choices=("start", "end"), required=True)
    p.add_argument("--values", type=_float_list, required=True)
    p.add_argument("--seeds", type=_seed_list, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("presets", help="print the shipped relative-rate table")
    p.add_argument("--kind", choices=("moe", "dense"), required=True)

    return parser


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, init_seed=args.seed)
    if args.data_seed is not None:
        cfg = replace(cfg, data_seed=args.data_seed)
    os.makedirs(args.out, exist_ok=True)
    try:
        run_log = train(cfg)
    except DivergenceError as err:
        if err.partial_log:
            _write_json(os.path.join(args.out, f"{err.partial_log['run_id']}.partial.json"), err.partial_log)
        log.error("diverged: %s", err)
        print(f"rlrs train: {err}", file=sys.stderr)
        return 2
    csv_path, meta_path = export(run_log, args.out)
    log.info("wrote %s and %s", csv_path, meta_path)
    print(f"final loss {run_log.curve.final_loss:.6f} -> {csv_path}")
    return 0


def _cmd_tune(args) -> int:
    cfg = load_train_config(args.config)
    if args.mode == "rlrs":
        space = rlrs_space(cfg.rates, cfg.weight_decay, cfg.init_scale)
    else:
        space = baseline_space(cfg.schedule.eta_base, cfg.schedule.alpha_end, cfg.weight_decay, cfg.init_scale)
    objective = search_objective(cfg, args.seeds, jobs=args.jobs)
    result = local_search(space, objective, budget=args.budget)
    os.makedirs(args.out, exist_ok=True)
    best_cfg = apply_overrides(cfg, result.best)
    with open(os.path.join(args.out, "best.config"), "w") as fh:
        fh.write(format_config(train_config_to_keys(best_cfg)))
    write_trail(result.trail, os.path.join(args.out, "trail.jsonl"))
    _write_json(
        os.path.join(args.out, "tune.json"),
        {
            "mode": args.mode,
            "best": {k: result.best[k] for k in sorted(result.best)},
            "objective": result.objective,
            "evaluations_used": result.evaluations_used,
            "converged": result.converged,
            "seeds": args.seeds,
        },
    )
    print(f"best objective {result.objective:.6f} after {result.evaluations_used} evaluations")
    return 0


def _cmd_compare(args) -> int:
    cfg_base = load_train_config(args.base)
    cfg_rlrs = load_train_config(args.rlrs)
    report = compare(cfg_base, cfg_rlrs, args.seeds, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    for run_log in report.base_logs + report.rlrs_logs:
        export(run_log, args.out)
    _write_json(os.path.join(args.out, "compare.json"), report.as_dict())
    print(f"speedup: {report.result}")
    return 0


def _cmd_extrapolate(args) -> int:
    small_cfg = load_train_config(args.small_result)
    large_cfg = load_train_config(args.large_config)
    os.makedirs(args.out, exist_ok=True)

    rlrs_large = transfer(
        small_cfg.rates, large_cfg, provenance={"source_config": str(args.small_result)}
    )
    rlrs_lr, rlrs_trail = tune_base_lr(args.grid, base_lr_objective(rlrs_large, args.seeds, jobs=args.jobs))
    base_large = replace(large_cfg, rates=type(large_cfg.rates).identity(large_cfg.model.components))
    base_lr, base_trail = tune_base_lr(args.grid, base_lr_objective(base_large, args.seeds, jobs=args.jobs))
    write_trail(rlrs_trail + base_trail, os.path.join(args.out, "grid_trail.jsonl"))

    rlrs_tuned = apply_overrides(rlrs_large, {"schedule.eta_base": rlrs_lr})
    base_tuned = apply_overrides(base_large, {"schedule.eta_base": base_lr})
    report = compare(base_tuned, rlrs_tuned, args.seeds, jobs=args.jobs)
    for run_log in report.base_logs + report.rlrs_logs:
        export(run_log, args.out)
    payload = report.as_dict()
    payload["provenance"] = dict(rlrs_tuned.provenance)
    payload["tuned_base_lr"] = {"baseline": base_lr, "relative": rlrs_lr}
    _write_json(os.path.join(args.out, "extrapolate.json"), payload)
    with open(os.path.join(args.out, "large_rlrs.config"), "w") as fh:
        fh.write(format_config(train_config_to_keys(rlrs_tuned)))
    print(f"tuned base lr: baseline {base_lr:g}, relative {rlrs_lr:g}; speedup: {report.result}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_train_config(args.config)
    key = f"rlrs.{args.component}.{args.which}"
    tag = ComponentTag(args.component)
    if tag not in cfg.model.components:
        raise ConfigError(f"component {args.component!r} is not active for a {cfg.model.kind} model")
    configs = []
    for value in args.values:
        for seed in args.seeds:
            run = apply_overrides(cfg, {key: value})
            configs.append(replace(run, data_seed=seed, run_id=f"ablate-{args.which}-{value:g}-d{seed}"))
    logs = run_many(configs, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    for run_log in logs:
        export(run_log, args.out)
    final_losses: dict[str, dict[str, float]] = {}
    i = 0
    for value in args.values:
        per_seed = {}
        for seed in args.seeds:
            per_seed[str(seed)] = logs[i].curve.final_loss
            i += 1
        final_losses[repr(float(value))] = per_seed
    _write_json(
        os.path.join(args.out, "ablate.json"),
        {"component": args.component, "which": args.which, "final_loss": final_losses},
    )
    print(f"ablated {key} over {len(args.values)} value(s) x {len(args.seeds)} seed(s)")
    return 0


def _cmd_presets(args) -> int:
    sys.stdout.write(rates_to_config_text(preset(args.kind)))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "tune": _cmd_tune,
    "compare": _cmd_compare,
    "extrapolate": _cmd_extrapolate,
    "ablate": _cmd_ablate,
    "presets": _cmd_presets,
}


def main(argv=None) -> int:
    level = os.environ.get("RLRS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"rlrs {args.command}: configuration error: {err}", file=sys.stderr)
        return 1
    except DivergenceError as err:
        print(f"rlrs {args.command}: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"rlrs {args.command}: i/o error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
