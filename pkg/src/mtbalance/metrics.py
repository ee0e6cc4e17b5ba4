"""Evaluation arithmetic: relative multi-task gain over single-task
references, mean rank across methods, the gradient-interference diagnostic,
and extraction of static weights from a recorded weight trace."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .weighters import SUM_TO_ONE, WeightVector


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    lower_is_better: bool


@dataclass(frozen=True)
class TaskMetrics:
    """Per-task groups of named metric values with better-direction flags."""

    per_task: tuple

    def __post_init__(self):
        if not self.per_task or any(len(group) == 0 for group in self.per_task):
            raise MetricError("every task needs at least one metric")

    @classmethod
    def build(cls, groups):
        """groups: per task, a list of (name, value, lower_is_better)."""
        return cls(per_task=tuple(
            tuple(MetricValue(n, float(v), bool(l)) for n, v, l in group)
            for group in groups))

    def structure(self):
        return tuple(tuple((m.name, m.lower_is_better) for m in group)
                     for group in self.per_task)


def _check_aligned(a: TaskMetrics, b: TaskMetrics):
    if a.structure() != b.structure():
        raise MetricError("task/metric structures do not match")


def delta_mtm(candidate: TaskMetrics, baseline: TaskMetrics):
    """Mean relative percentage gain over the single-task references.

    Per task, average over that task's metrics of
    (-1)^lower_is_better * (M_cand - M_base) / M_base; then average over
    tasks and report in percent. Positive means the multi-task run beat the
    references.
    """
    _check_aligned(candidate, baseline)
    task_deltas = []
    for group_c, group_b in zip(candidate.per_task, baseline.per_task):
        rel = []
        for mc, mb in zip(group_c, group_b):
            if mb.value == 0.0:
                raise MetricError(f"baseline metric {mc.name!r} is zero")
            sign = -1.0 if mc.lower_is_better else 1.0
            rel.append(sign * (mc.value - mb.value) / mb.value)
        task_deltas.append(np.mean(rel))
    return float(np.mean(task_deltas) * 100.0)


def _average_ranks(values, lower_is_better):
    """Competition ranks with ties averaged: 1 + #better + #tied/2."""
    values = np.asarray(values, dtype=float)
    signed = values if lower_is_better else -values
    ranks = np.empty(values.size)
    for i in range(values.size):
        better = np.sum(signed < signed[i])
        tied = np.sum(signed == signed[i]) - 1
        ranks[i] = 1.0 + better + tied / 2.0
    return ranks


def mean_rank(entries):
    """Mean rank of each entry across all task metrics (1 = best).

    entries is a sequence of TaskMetrics with identical structure; ties get
    average ranks so the per-metric rank sum is conserved.
    """
    if len(entries) < 1:
        raise MetricError("mean_rank needs at least one entry")
    first = entries[0]
    for other in entries[1:]:
        _check_aligned(first, other)
    n_tasks = len(first.per_task)
    per_entry_task_means = np.zeros((len(entries), n_tasks))
    for t in range(n_tasks):
        group = first.per_task[t]
        metric_ranks = []
        for j, metric in enumerate(group):
            col = [e.per_task[t][j].value for e in entries]
            metric_ranks.append(_average_ranks(col, metric.lower_is_better))
        per_entry_task_means[:, t] = np.mean(metric_ranks, axis=0)
    return per_entry_task_means.mean(axis=1)


class InterferenceMeter:
    """Running mean over bundles of the mean cosine between each task
    gradient and the average direction. Degenerate mean directions count as
    zero and are tallied; zero task gradients are skipped and tallied."""

    def __init__(self):
        self.total = 0.0
        self.count = 0
        self.degenerate = 0
        self.skipped_tasks = 0

    def update(self, bundle):
        G = bundle.matrix
        if G.shape[0] < 2:
            raise ValueError("interference needs at least two tasks")
        mean_dir = G.mean(axis=0)
        mean_norm = np.linalg.norm(mean_dir)
        if mean_norm < 1e-12:
            self.degenerate += 1
            value = 0.0
        else:
            # a nonzero mean direction guarantees at least one nonzero row
            cosines = []
            for i in range(G.shape[0]):
                n = bundle.norms[i]
                if n < 1e-12:
                    self.skipped_tasks += 1
                    continue
                cosines.append(float(G[i] @ mean_dir) / (n * mean_norm))
            value = float(np.mean(cosines))
        self.total += value
        self.count += 1
        return value

    @property
    def mean(self):
        if self.count == 0:
            raise ValueError("no bundles accumulated")
        return self.total / self.count


def interference(bundles):
    """Mean interference statistic over an iterable of gradient bundles."""
    meter = InterferenceMeter()
    for bundle in bundles:
        meter.update(bundle)
    return meter.mean


@dataclass
class WeightTrace:
    """Per-step weight vectors grouped by epoch for one training run."""

    method: str
    seed: int
    epochs: list = field(default_factory=list)

    def append_epoch(self, steps):
        arr = np.atleast_2d(np.asarray(steps, dtype=float))
        if self.epochs and arr.shape[1] != self.epochs[0].shape[1]:
            raise ValueError("weight vectors changed length between epochs")
        self.epochs.append(arr)

    @property
    def n_tasks(self):
        return self.epochs[0].shape[1]


def epoch_ema(epoch_means, beta):
    """EMA over per-epoch means, initialized to the first epoch, no bias
    correction; returns the final-epoch value."""
    epoch_means = np.atleast_2d(np.asarray(epoch_means, dtype=float))
    ema = epoch_means[0].copy()
    for row in epoch_means[1:]:
        ema = beta * ema + (1.0 - beta) * row
    return ema


def extract_fixed_weights(trace: WeightTrace, beta=0.9):
    """Static weights from a trace: epoch means -> EMA -> last epoch,
    renormalized onto the simplex."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    if not trace.epochs:
        raise ValueError("empty weight trace")
    means = np.stack([ep.mean(axis=0) for ep in trace.epochs])
    ema = epoch_ema(means, beta)
    total = ema.sum()
    if total <= 0.0:
        raise ValueError("extracted weights do not sum to a positive value")
    return WeightVector(ema / total, SUM_TO_ONE)
