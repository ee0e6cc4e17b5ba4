"""Result persistence: one CSV + one JSON per trial, one JSON per
comparison report, and strict config-file parsing.

The JSON files are the lossless source of truth (floats round-trip
exactly); the CSV is the tabular per-step view for external plotting.
Every file carries a schema_version field.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .harness import EpochRecord, MetricReport, MethodSummary, TrialConfig, TrialResult
from .metrics import TaskMetrics, WeightTrace

SCHEMA_VERSION = 1

_CONFIG_FIELDS = ("problem", "method", "problem_params", "method_params",
                  "lr", "dropout", "weight_decay", "batch_size", "epochs",
                  "seed", "encoder", "head_hidden", "task_subset")


def config_to_dict(cfg: TrialConfig):
    d = asdict(cfg)
    d["encoder"] = [list(layer) for layer in cfg.encoder]
    d["head_hidden"] = list(cfg.head_hidden)
    d["task_subset"] = None if cfg.task_subset is None else list(cfg.task_subset)
    return d


def config_from_dict(data, **overrides):
    """Build a TrialConfig from parsed JSON; unknown keys are rejected."""
    unknown = sorted(set(data) - set(_CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(data)
    merged.update(overrides)
    if "encoder" in merged and merged["encoder"] is not None:
        merged["encoder"] = tuple((int(w), str(a)) for w, a in merged["encoder"])
    if "head_hidden" in merged and merged["head_hidden"] is not None:
        merged["head_hidden"] = tuple(int(w) for w in merged["head_hidden"])
    if merged.get("task_subset") is not None:
        merged["task_subset"] = tuple(int(t) for t in merged["task_subset"])
    try:
        return TrialConfig(**merged)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def load_config_file(path, **overrides):
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(data, **overrides)


def _listify(arr):
    return np.asarray(arr, dtype=float).tolist()


def trial_to_dict(result: TrialResult):
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_dict(result.config),
        "task_names": list(result.task_names),
        "epochs": [{"train_losses": list(map(float, r.train_losses)),
                    "val": r.val, "test": r.test,
                    "val_score": r.val_score,
                    "interference": r.interference,
                    "rotation_loss": r.rotation_loss}
                   for r in result.epochs],
        "weight_trace": [_listify(ep) for ep in result.weight_trace.epochs],
        "loss_trace": [_listify(ep) for ep in result.loss_trace],
        "residual_trace": [list(ep) for ep in result.residual_trace],
        "interference_trace": [list(ep) for ep in result.interference_trace],
        "best_epoch": result.best_epoch,
        "crashed": result.crashed,
        "crash_step": result.crash_step,
        "crash_reason": result.crash_reason,
        "wall_time": result.wall_time,
    }


def trial_from_dict(data):
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data.get('schema_version')!r}")
    cfg = config_from_dict(data["config"])
    trace = WeightTrace(method=cfg.method, seed=cfg.seed)
    for ep in data["weight_trace"]:
        trace.append_epoch(np.asarray(ep, dtype=float))
    epochs = [EpochRecord(train_losses=[float(x) for x in ep["train_losses"]],
                          val=ep["val"], test=ep["test"],
                          val_score=ep["val_score"],
                          interference=ep["interference"],
                          rotation_loss=ep["rotation_loss"])
              for ep in data["epochs"]]
    return TrialResult(
        config=cfg, task_names=tuple(data["task_names"]), epochs=epochs,
        weight_trace=trace,
        loss_trace=[np.asarray(ep, dtype=float) for ep in data["loss_trace"]],
        residual_trace=[list(ep) for ep in data["residual_trace"]],
        interference_trace=[list(ep) for ep in data["interference_trace"]],
        best_epoch=data["best_epoch"], crashed=data["crashed"],
        crash_step=data["crash_step"], crash_reason=data["crash_reason"],
        wall_time=data["wall_time"])


def trial_csv_header(task_names):
    cols = ["schema_version", "step", "epoch"]
    cols += [f"loss_{t}" for t in task_names]
    cols += [f"weight_{t}" for t in task_names]
    cols += ["interference", "residual", "val_score"]
    cols += [f"val_{t}" for t in task_names]
    cols += [f"test_{t}" for t in task_names]
    return cols


def _primary_metric(entry):
    return entry.get("accuracy", entry.get("mse"))


def save_trial(result: TrialResult, directory, stem=None):
    """Write <stem>.json (lossless) and <stem>.csv (per-step table).

    The CSV has one row per training step; the epoch-level validation/test
    columns are filled on the last step of each epoch and blank elsewhere.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    stem = stem or f"{cfg.problem}_{cfg.method}_seed{cfg.seed}"
    json_path = directory / f"{stem}.json"
    csv_path = directory / f"{stem}.csv"
    json_path.write_text(json.dumps(trial_to_dict(result), indent=1),
                         encoding="utf-8")

    names = result.task_names
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(trial_csv_header(names))
        step = 0
        for e, weights in enumerate(result.weight_trace.epochs):
            losses = result.loss_trace[e]
            intf = result.interference_trace[e]
            resid = result.residual_trace[e]
            record = result.epochs[e] if e < len(result.epochs) else None
            for s in range(weights.shape[0]):
                last = s == weights.shape[0] - 1 and record is not None
                row = [SCHEMA_VERSION, step, e]
                row += [repr(x) for x in losses[s]]
                row += [repr(x) for x in weights[s]]
                row += ["" if intf[s] is None else repr(intf[s]),
                        "" if resid[s] is None else repr(resid[s])]
                if last:
                    row += [repr(record.val_score)]
                    row += [repr(_primary_metric(record.val[t])) for t in names]
                    row += [repr(_primary_metric(record.test[t])) for t in names]
                else:
                    row += [""] * (1 + 2 * len(names))
                writer.writerow(row)
                step += 1
    return json_path, csv_path


def load_trial(json_path):
    data = json.loads(Path(json_path).read_text(encoding="utf-8"))
    return trial_from_dict(data)


def _task_metrics_to_list(tm: TaskMetrics):
    return [[[m.name, m.value, m.lower_is_better] for m in group]
            for group in tm.per_task]


def _task_metrics_from_list(data):
    return TaskMetrics.build([[(n, v, l) for n, v, l in group]
                              for group in data])


def report_to_dict(report: MetricReport):
    return {
        "schema_version": SCHEMA_VERSION,
        "problem": report.problem,
        "baseline": _task_metrics_to_list(report.baseline),
        "interference": report.interference,
        "methods": {name: {"delta_per_seed": s.delta_per_seed,
                           "delta_mean": s.delta_mean,
                           "delta_of_means": s.delta_of_means,
                           "quantiles": s.quantiles,
                           "mean_weights": s.mean_weights,
                           "crashes": s.crashes,
                           "completed": s.completed,
                           "mean_rank": s.mean_rank}
                    for name, s in report.methods.items()},
    }


def report_from_dict(data):
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data.get('schema_version')!r}")
    methods = {name: MethodSummary(**entry)
               for name, entry in data["methods"].items()}
    return MetricReport(problem=data["problem"],
                        baseline=_task_metrics_from_list(data["baseline"]),
                        methods=methods, interference=data["interference"])


def save_report(report: MetricReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=1),
                    encoding="utf-8")
    return path


def load_report(path):
    return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
