"""Command line interface.

Subcommands: run (seeded trials of one method on one problem), grid
(hyperparameter grid search), compare (multi-method comparison against
single-task references), extract-replay (static-weight extraction from a
stored trial and a rerun with those weights).

The MTBALANCE_OUT environment variable, when set, overrides every --out
directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, persistence
from .errors import BalancingError, ConfigError

ENV_OUT = "MTBALANCE_OUT"


def _out_root(args):
    return Path(os.environ.get(ENV_OUT) or args.out)


def _load_overrides(args, **extra):
    if getattr(args, "config", None):
        return persistence.load_config_file(args.config, **extra)
    return persistence.config_from_dict({}, **extra)


def _protocol_from_config(cfg, seeds, threads):
    return harness.Protocol(seeds=tuple(range(seeds)), lr=cfg.lr,
                            dropout=cfg.dropout,
                            weight_decay=cfg.weight_decay,
                            batch_size=cfg.batch_size, epochs=cfg.epochs,
                            encoder=cfg.encoder, head_hidden=cfg.head_hidden,
                            threads=threads)


def _cmd_run(args):
    base = _load_overrides(args, problem=args.problem, method=args.smto)
    out = _out_root(args)
    for seed in range(args.seeds):
        cfg = replace(base, seed=seed)
        result = harness.run_trial(cfg)
        json_path, csv_path = persistence.save_trial(result, out)
        if result.crashed:
            print(f"seed {seed}: crashed at step {result.crash_step} "
                  f"({result.crash_reason}) -> {json_path}")
        else:
            record = result.epochs[result.best_epoch]
            print(f"seed {seed}: best epoch {result.best_epoch} "
                  f"val_score {record.val_score:.5f} -> {json_path}")
    return 0


def _cmd_grid(args):
    base = _load_overrides(args, problem=args.problem, method=args.smto)
    protocol = _protocol_from_config(base, seeds=1, threads=args.threads)
    result = harness.grid_search(args.problem, args.smto,
                                 problem_params=base.problem_params,
                                 protocol=protocol, threads=args.threads)
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"grid_{args.problem}_{args.smto}.json"
    payload = {"schema_version": persistence.SCHEMA_VERSION,
               "problem": args.problem, "smto": args.smto,
               "selected": result.selected, "table": result.table,
               "excluded": result.excluded, "final_test": result.final_test}
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    sel = result.selected
    print(f"selected lr={sel['lr']} dropout={sel['dropout']} "
          f"wd={sel['weight_decay']} params={sel['method_params']} -> {path}")
    return 0


def _cmd_compare(args):
    problems = [p.strip() for p in args.problems.split(",") if p.strip()]
    methods = [m.strip() for m in args.smtos.split(",") if m.strip()]
    base = _load_overrides(args, problem=problems[0], method=methods[0])
    protocol = _protocol_from_config(base, seeds=args.seeds,
                                     threads=args.threads)
    out = _out_root(args)
    for problem in problems:
        report = harness.compare_smtos(problem, methods, protocol,
                                       problem_params=base.problem_params)
        path = persistence.save_report(report, out / f"compare_{problem}.json")
        print(f"{problem}: -> {path}")
        for name, summary in report.methods.items():
            if summary.completed == 0:
                print(f"  {name}: all {summary.crashes} trials crashed")
            else:
                mr = "-" if summary.mean_rank is None else f"{summary.mean_rank:.2f}"
                print(f"  {name}: delta_mtm {summary.delta_mean:+.3f}% "
                      f"(MR {mr}, crashes {summary.crashes})")
    return 0


def _cmd_extract_replay(args):
    source = persistence.load_trial(args.trial)
    pair = harness.extract_and_replay(source.config)
    out = _out_root(args)
    stem = Path(args.trial).stem
    persistence.save_trial(pair.source, out, stem=f"{stem}_source")
    persistence.save_trial(pair.replay, out, stem=f"{stem}_replay")
    weights = ", ".join(f"{w:.4f}" for w in pair.fixed_weights)
    print(f"extracted weights: [{weights}]")
    if pair.replay.crashed:
        print(f"replay crashed at step {pair.replay.crash_step}")
    else:
        record = pair.replay.epochs[pair.replay.best_epoch]
        print(f"replay best epoch {pair.replay.best_epoch} "
              f"val_score {record.val_score:.5f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mtbalance",
        description="Multi-task gradient balancing experiments")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent trials")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run seeded trials of one method")
    run_p.add_argument("--problem", required=True, choices=harness.PROBLEMS)
    run_p.add_argument("--smto", required=True, choices=harness.ALL_METHODS)
    run_p.add_argument("--config", help="JSON file mirroring TrialConfig fields")
    run_p.add_argument("--seeds", type=int, default=1)
    run_p.add_argument("--out", default="results")
    run_p.set_defaults(func=_cmd_run)

    grid_p = sub.add_parser("grid", help="hyperparameter grid search")
    grid_p.add_argument("--problem", required=True, choices=harness.PROBLEMS)
    grid_p.add_argument("--smto", required=True, choices=harness.ALL_METHODS)
    grid_p.add_argument("--config")
    grid_p.add_argument("--out", default="results")
    grid_p.set_defaults(func=_cmd_grid)

    cmp_p = sub.add_parser("compare", help="compare methods on problems")
    cmp_p.add_argument("--problems", required=True,
                       help="comma-separated problem ids")
    cmp_p.add_argument("--smtos", required=True,
                       help="comma-separated method ids")
    cmp_p.add_argument("--config")
    cmp_p.add_argument("--seeds", type=int, default=3)
    cmp_p.add_argument("--out", default="results")
    cmp_p.set_defaults(func=_cmd_compare)

    er_p = sub.add_parser("extract-replay",
                          help="extract static weights from a stored trial and rerun")
    er_p.add_argument("--trial", required=True, help="path to a trial .json")
    er_p.add_argument("--out", default="results")
    er_p.set_defaults(func=_cmd_extract_replay)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BalancingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
