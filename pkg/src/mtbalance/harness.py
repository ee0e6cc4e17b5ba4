"""Experiment engine: wires balancing methods into the model training loop,
runs seeded trials, grid searches, multi-method comparisons against
single-task references, and fixed-weight extraction/replay.

Every trial is fully determined by its config (the seed feeds separate
counter-based streams for data, init, dropout, batching and method
randomness), so trials can run on any number of workers without changing a
single recorded number.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregators, weighters
from .errors import BalancingError, ConfigError
from .metrics import (InterferenceMeter, TaskMetrics, WeightTrace, delta_mtm,
                      extract_fixed_weights, mean_rank)
from .model import (AdamState, HeadSpec, NetworkSpec, adam_step,
                    assemble_full_gradient, backward_per_task,
                    backward_weighted, forward, init_params)
from .numerics import rng_stream
from .problems import (ConflictSpec, conflict_regression, load_multimnist,
                       mixed_norm_two_task, symmetric_two_task)
from .rotation import RotationSet, rotation_loss, rotation_step, rotation_target
from .weighters import FamoState, UwState, WeightVector

GRADIENT_METHODS = ("mgda_ub", "pcgrad", "graddrop", "edm", "imtl_g",
                    "cagrad", "nash_mtl", "cdtt", "rotograd")
LOSS_METHODS = ("unit_scal", "si", "rlw_normal", "rlw_dirichlet", "uw",
                "famo", "auto_lambda", "fixed")
ALL_METHODS = GRADIENT_METHODS + LOSS_METHODS

PROBLEMS = ("symmetric_two_task", "mixed_norm_two_task",
            "conflict_regression", "multimnist")

# rng stream ids per purpose; every consumer gets its own counter stream
_STREAM_DATA = 0
_STREAM_INIT = 1
_STREAM_DROPOUT = 2
_STREAM_METHOD = 3
_STREAM_BATCH = 4
_STREAM_VAL = 5

LOSS_METHOD_DIAG_SAMPLES = 8

DEFAULT_LR_GRID = (0.01, 0.075, 0.005, 0.0025, 0.001, 0.00075, 0.0005)
DEFAULT_DROPOUT_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_WEIGHT_DECAY_GRID = (1e-4, 1e-5, 0.0)
METHOD_GRIDS = {
    "cagrad": {"c": (0.2, 0.5, 0.8)},
    "cdtt": {"alpha_tension": (0.2, 0.4, 0.6, 0.8, 1.0)},
    "famo": {"gamma": (0.01, 0.001, 0.0001)},
    "rotograd": {"lr_scale": (5.0, 1.0, 0.5, 0.1)},
    "auto_lambda": {"lr_scale": (1000.0, 100.0, 10.0, 1.0, 0.1, 0.01, 0.001)},
}


@dataclass(frozen=True)
class TrialConfig:
    """One training configuration; fully determines a trial together with
    nothing else (the seed drives all randomness)."""

    problem: str
    method: str
    problem_params: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)
    lr: float = 0.0025
    dropout: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 8
    seed: int = 0
    encoder: tuple = ((64, "tanh"), (32, "tanh"))
    head_hidden: tuple = ()
    task_subset: tuple = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.method not in ALL_METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class EpochRecord:
    train_losses: list
    val: dict
    test: dict
    val_score: float
    interference: float = None
    rotation_loss: float = None


@dataclass
class TrialResult:
    config: TrialConfig
    task_names: tuple
    epochs: list
    weight_trace: WeightTrace
    loss_trace: list
    residual_trace: list
    interference_trace: list
    best_epoch: int = None
    crashed: bool = False
    crash_step: int = None
    crash_reason: str = None
    wall_time: float = 0.0

    def test_metrics(self) -> TaskMetrics:
        """Test metrics at the best-validation epoch, as TaskMetrics."""
        if self.crashed or self.best_epoch is None:
            raise BalancingError("trial has no usable epochs")
        record = self.epochs[self.best_epoch]
        groups = []
        for name, metrics in record.test.items():
            groups.append([(f"{name}:{m}", v, m != "accuracy")
                           for m, v in metrics.items() if m != "loss"])
        return TaskMetrics.build(groups)


def build_problem(cfg: TrialConfig):
    """Materialize the datasets for a config (deterministic in the seed)."""
    rng = rng_stream(cfg.seed, _STREAM_DATA)
    params = dict(cfg.problem_params)
    size = params.pop("size", 1200)
    if cfg.problem == "symmetric_two_task":
        splits = symmetric_two_task(rng, size, **params)
    elif cfg.problem == "mixed_norm_two_task":
        splits = mixed_norm_two_task(rng, size, **params)
    elif cfg.problem == "conflict_regression":
        spec = ConflictSpec(n_tasks=params.pop("n_tasks", 4),
                            cosine=params.pop("cosine", 0.3),
                            noise=params.pop("noise", 0.1),
                            input_dim=params.pop("input_dim", 12))
        splits = conflict_regression(spec, rng, size, **params)
    elif cfg.problem == "multimnist":
        splits = load_multimnist(params.pop("images"), params.pop("labels"),
                                 rng, size=size, **params)
    else:  # pragma: no cover - guarded by TrialConfig
        raise ConfigError(f"unknown problem {cfg.problem!r}")
    if cfg.task_subset is not None:
        splits = splits.subset_tasks(tuple(cfg.task_subset))
    return splits


def network_for(cfg: TrialConfig, splits):
    heads = tuple(HeadSpec(output_dim=t.output_dim, loss=t.loss,
                           hidden=tuple(cfg.head_hidden), name=t.name)
                  for t in splits.tasks)
    return NetworkSpec(input_dim=splits.train.inputs.shape[1], heads=heads,
                       encoder=tuple(tuple(layer) for layer in cfg.encoder),
                       dropout_p=cfg.dropout)


def evaluate_split(spec, params, ds):
    """Eval-mode per-task metrics on a whole split."""
    state = forward(spec, params, ds.inputs, ds.targets, train=False)
    out = {}
    for i, task in enumerate(ds.tasks):
        entry = {"loss": float(state.losses[i])}
        if task.metric_name == "accuracy":
            pred = state.outputs[i].argmax(axis=1)
            entry["accuracy"] = float(np.mean(pred == ds.targets[i]))
        else:
            entry["mse"] = float(state.losses[i])
        out[task.name] = entry
    return out


def _task_scalar(task, entry):
    # higher is better for the selection scalar
    if task.metric_name == "accuracy":
        return entry["accuracy"]
    return -entry["loss"]


class _MethodRunner:
    """Per-trial state machine for one balancing method."""

    def __init__(self, cfg, spec, splits, rng):
        self.cfg = cfg
        self.spec = spec
        self.splits = splits
        self.rng = rng
        self.n = spec.n_tasks
        p = dict(cfg.method_params)
        m = cfg.method
        self.params = p
        self.rotations = None
        if m == "cagrad":
            self.c = p.get("c", 0.5)
        elif m == "nash_mtl":
            self.iters = p.get("iters", 20)
        elif m == "graddrop":
            self.k = p.get("k", 1.0)
            self.p_leak = p.get("p", 0.5)
        elif m == "cdtt":
            self.state = aggregators.CdttState.create(
                self.n, window=p.get("window", 5),
                alpha_tension=p.get("alpha_tension", 0.6))
        elif m == "rotograd":
            self.rotations = RotationSet.identity(
                self.n, spec.feature_dim, lr_scale=p.get("lr_scale", 0.1))
        elif m == "uw":
            self.state = UwState.create(self.n)
            self.s_adam = AdamState.create(self.n, lr=cfg.lr)
        elif m == "famo":
            self.state = FamoState.create(self.n, gamma=p.get("gamma", 0.001),
                                          logit_lr=p.get("logit_lr", 0.025))
        elif m == "auto_lambda":
            init = p.get("init_weight", 0.1)
            self.lam = WeightVector(np.full(self.n, init), weighters.FREE)
            self.aux_lr = cfg.lr * p.get("lr_scale", 0.1)
        elif m == "fixed":
            if "weights" not in p:
                raise ConfigError("fixed method needs method_params['weights']")
            w = np.asarray(p["weights"], dtype=float)
            if w.size != self.n:
                raise ConfigError("fixed weights length != task count")
            self.fixed_weights = WeightVector(w, weighters.FREE)

    def feature_maps(self):
        return self.rotations.rotations if self.rotations is not None else None

    def gradient_step(self, model_params, state):
        """Aggregate per-task gradients; returns (full gradient, recorded
        weights, bundle, residual)."""
        tg = backward_per_task(self.spec, model_params, state)
        m = self.cfg.method
        if m == "mgda_ub":
            res = aggregators.mgda_ub(tg.bundle)
        elif m == "pcgrad":
            res = aggregators.pcgrad(tg.bundle, self.rng)
        elif m == "graddrop":
            res = aggregators.graddrop(tg.bundle, self.rng, k=self.k,
                                       p=self.p_leak)
        elif m == "edm":
            res = aggregators.edm(tg.bundle)
        elif m == "imtl_g":
            res = aggregators.imtl_g(tg.bundle)
        elif m == "cagrad":
            res = aggregators.cagrad(tg.bundle, c=self.c)
        elif m == "nash_mtl":
            res = aggregators.nash_mtl(tg.bundle, iters=self.iters)
        elif m == "cdtt":
            res = aggregators.cdtt(tg.bundle, state.losses, self.state)
        elif m == "rotograd":
            direction = tg.bundle.matrix.sum(axis=0)
            res = aggregators.AggregationResult(
                direction=direction,
                weights=WeightVector(np.full(self.n, 1.0 / self.n),
                                     weighters.SUM_TO_ONE),
                diagnostics={})
        else:  # pragma: no cover
            raise ConfigError(f"not a gradient method: {m}")
        grad = assemble_full_gradient(self.spec, tg, res.direction)
        residual = res.diagnostics.get("residual")
        return grad, res.weights.normalized(), tg, residual

    def loss_weights(self, model_params, state, batcher):
        """Current loss weights for a scalarized backward pass."""
        m = self.cfg.method
        losses = state.losses
        if m == "unit_scal":
            return weighters.unit_scal(losses)
        if m == "si":
            return weighters.si(losses)
        if m == "rlw_normal":
            return weighters.rlw(self.rng, "normal", self.n)
        if m == "rlw_dirichlet":
            return weighters.rlw(self.rng, "dirichlet", self.n)
        if m == "uw":
            _total, wv = weighters.uw_loss(losses, self.state)
            return wv
        if m == "famo":
            return weighters.famo_weights(self.state, losses)
        if m == "auto_lambda":
            vx, vy = batcher.val_batch()
            self.lam, _info = weighters.auto_lambda_update(
                self.lam, self.spec, model_params, state.inputs,
                state.targets, vx, vy, lr=self.cfg.lr, aux_lr=self.aux_lr)
            return self.lam
        if m == "fixed":
            return weighters.fixed(self.fixed_weights, losses)
        raise ConfigError(f"not a loss method: {m}")  # pragma: no cover

    def after_step(self, model_params, state, losses_before, tg):
        """Post-update bookkeeping (FAMO logit update, UW s update,
        rotation training). Returns the rotation loss when monitored."""
        m = self.cfg.method
        if m == "famo":
            new_state = forward(self.spec, model_params, state.inputs,
                                state.targets, train=state.train,
                                feature_maps=state.feature_maps,
                                reuse_from=state)
            self.state = weighters.famo_update(self.state, losses_before,
                                               new_state.losses)
        elif m == "uw":
            grad_s = weighters.uw_grad_s(losses_before, self.state)
            self.state.s = adam_step(self.s_adam, self.state.s, grad_s)
        elif m == "rotograd" and tg is not None:
            v, degenerate = rotation_target(tg.feature_grads)
            monitored = rotation_loss(self.rotations, tg.feature_grads, v)
            if not degenerate:
                rotation_step(self.rotations, tg.feature_grads, v,
                              self.cfg.lr * self.rotations.lr_scale)
            return monitored
        return None


class _Batcher:
    def __init__(self, splits, batch_size, batch_rng, val_rng):
        self.splits = splits
        self.batch_size = batch_size
        self.batch_rng = batch_rng
        self.val_rng = val_rng

    def epoch_batches(self):
        n = self.splits.train.n_samples
        perm = self.batch_rng.permutation(n)
        for start in range(0, n, self.batch_size):
            idx = perm[start:start + self.batch_size]
            yield (self.splits.train.inputs[idx],
                   tuple(t[idx] for t in self.splits.train.targets))

    def val_batch(self):
        n = self.splits.val.n_samples
        take = min(self.batch_size, n)
        idx = self.val_rng.integers(0, n, size=take)
        return (self.splits.val.inputs[idx],
                tuple(t[idx] for t in self.splits.val.targets))


def run_trial(cfg: TrialConfig) -> TrialResult:
    """Train one configuration end to end.

    Gradient methods get fresh per-task shared gradients every step (one
    backward per task); loss methods scalarize and do a single backward.
    Method failures derived from BalancingError are recorded as a crashed
    trial with the step index, never swallowed.
    """
    t0 = time.perf_counter()
    splits = build_problem(cfg)
    spec = network_for(cfg, splits)
    params = init_params(spec, rng_stream(cfg.seed, _STREAM_INIT))
    adam = AdamState.create(params.size, lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    dropout_rng = rng_stream(cfg.seed, _STREAM_DROPOUT)
    method_rng = rng_stream(cfg.seed, _STREAM_METHOD)
    batcher = _Batcher(splits, cfg.batch_size,
                       rng_stream(cfg.seed, _STREAM_BATCH),
                       rng_stream(cfg.seed, _STREAM_VAL))
    runner = _MethodRunner(cfg, spec, splits, method_rng)
    is_gradient = cfg.method in GRADIENT_METHODS

    trace = WeightTrace(method=cfg.method, seed=cfg.seed)
    loss_trace, residual_trace, interference_trace = [], [], []
    epoch_records = []
    first_scalars = None
    crashed = False
    crash_step = crash_reason = None
    step = 0

    for _epoch in range(cfg.epochs):
        ep_weights, ep_losses, ep_resid, ep_intf, ep_rot = [], [], [], [], []
        n_steps = int(np.ceil(splits.train.n_samples / cfg.batch_size))
        diag_steps = set(np.linspace(
            0, max(n_steps - 1, 0),
            min(LOSS_METHOD_DIAG_SAMPLES, n_steps)).round().astype(int))
        meter = InterferenceMeter()
        for bi, (bx, by) in enumerate(batcher.epoch_batches()):
            try:
                state = forward(spec, params, bx, by, rng=dropout_rng,
                                train=True, feature_maps=runner.feature_maps())
                losses = state.losses.copy()
                tg = None
                if is_gradient:
                    grad, rec_weights, tg, residual = runner.gradient_step(params, state)
                else:
                    wv = runner.loss_weights(params, state, batcher)
                    grad = backward_weighted(spec, params, state, wv.values)
                    rec_weights = wv.normalized()
                    residual = None
                    if bi in diag_steps:
                        tg = backward_per_task(spec, params, state)
                params = adam_step(adam, params, grad)
                rot_loss = runner.after_step(params, state, losses, tg)
            except BalancingError as err:
                crashed = True
                crash_step = step
                crash_reason = f"{type(err).__name__}: {err}"
                break
            ep_weights.append(rec_weights)
            ep_losses.append(losses)
            ep_resid.append(None if residual is None else float(residual))
            if tg is not None:
                ep_intf.append(meter.update(tg.bundle))
            else:
                ep_intf.append(None)
            if rot_loss is not None:
                ep_rot.append(rot_loss)
            step += 1

        if ep_weights:
            trace.append_epoch(np.array(ep_weights))
            loss_trace.append(np.array(ep_losses))
            residual_trace.append(ep_resid)
            interference_trace.append(ep_intf)
        if crashed:
            break

        val = evaluate_split(spec, params, splits.val)
        test = evaluate_split(spec, params, splits.test)
        train_eval = [float(x) for x in np.mean(ep_losses, axis=0)]
        scalars = np.array([_task_scalar(t, val[t.name]) for t in splits.tasks])
        if first_scalars is None:
            first_scalars = scalars
        # per-task relative improvement over the first epoch, averaged
        val_score = float(np.mean((scalars - first_scalars)
                                  / (np.abs(first_scalars) + 1e-8)))
        epoch_records.append(EpochRecord(
            train_losses=train_eval, val=val, test=test, val_score=val_score,
            interference=(None if not any(v is not None for v in ep_intf)
                          else float(np.mean([v for v in ep_intf if v is not None]))),
            rotation_loss=(float(np.mean(ep_rot)) if ep_rot else None)))

    best_epoch = None
    if epoch_records:
        best_epoch = int(np.argmax([r.val_score for r in epoch_records]))
    return TrialResult(config=cfg,
                       task_names=tuple(t.name for t in splits.tasks),
                       epochs=epoch_records, weight_trace=trace,
                       loss_trace=loss_trace, residual_trace=residual_trace,
                       interference_trace=interference_trace,
                       best_epoch=best_epoch, crashed=crashed,
                       crash_step=crash_step, crash_reason=crash_reason,
                       wall_time=time.perf_counter() - t0)


def run_trials(configs, threads=1):
    """Run independent trials on a bounded worker pool; output order matches
    input order and contents are identical for any thread count."""
    if threads <= 1 or len(configs) <= 1:
        return [run_trial(c) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_trial, configs))


@dataclass(frozen=True)
class Protocol:
    """How compare_smtos runs its trials."""

    seeds: tuple = (0, 1, 2)
    lr: float = 0.0025
    dropout: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 8
    encoder: tuple = ((64, "tanh"), (32, "tanh"))
    head_hidden: tuple = ()
    method_params: dict = field(default_factory=dict)
    threads: int = 1


def _base_config(problem, problem_params, method, protocol, seed,
                 task_subset=None, method_params=None):
    return TrialConfig(problem=problem, method=method,
                       problem_params=dict(problem_params or {}),
                       method_params=dict(method_params or {}),
                       lr=protocol.lr, dropout=protocol.dropout,
                       weight_decay=protocol.weight_decay,
                       batch_size=protocol.batch_size, epochs=protocol.epochs,
                       seed=seed, encoder=protocol.encoder,
                       head_hidden=protocol.head_hidden,
                       task_subset=task_subset)


def _quantiles(values):
    v = np.asarray(values, dtype=float)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4])}


@dataclass
class MethodSummary:
    delta_per_seed: list
    delta_mean: float
    delta_of_means: float
    quantiles: dict
    mean_weights: list
    crashes: int
    completed: int
    mean_rank: float = None


@dataclass
class MetricReport:
    problem: str
    baseline: TaskMetrics
    methods: dict
    interference: float = None
    schema_version: int = 1


def _mean_task_metrics(per_seed):
    """Average TaskMetrics across seeds (aligned structures)."""
    first = per_seed[0]
    groups = []
    for t, group in enumerate(first.per_task):
        row = []
        for j, m in enumerate(group):
            vals = [tm.per_task[t][j].value for tm in per_seed]
            row.append((m.name, float(np.mean(vals)), m.lower_is_better))
        groups.append(row)
    return TaskMetrics.build(groups)


def single_task_baseline(problem, problem_params, protocol):
    """Train each task alone (uniform weighting on a one-task model) and
    average the test metrics at the best-validation epochs over seeds."""
    probe = _base_config(problem, problem_params, "unit_scal", protocol, 0)
    n_tasks = len(build_problem(probe).tasks)
    per_task_groups = []
    trials = {}
    for t in range(n_tasks):
        cfgs = [_base_config(problem, problem_params, "unit_scal", protocol,
                             seed, task_subset=(t,)) for seed in protocol.seeds]
        results = run_trials(cfgs, threads=protocol.threads)
        ok = [r for r in results if not r.crashed]
        if not ok:
            raise BalancingError(f"all single-task baselines crashed for task {t}")
        merged = _mean_task_metrics([r.test_metrics() for r in ok])
        per_task_groups.append([(m.name, m.value, m.lower_is_better)
                                for m in merged.per_task[0]])
        trials[t] = results
    return TaskMetrics.build(per_task_groups), trials


def compare_smtos(problem, methods, protocol: Protocol, problem_params=None):
    """Run every method over the protocol seeds and score them against the
    single-task references; crashes are counted, not raised."""
    problem_params = dict(problem_params or {})
    baseline, _baseline_trials = single_task_baseline(problem, problem_params,
                                                      protocol)
    summaries = {}
    mean_metrics = {}
    interference_vals = []
    for method in methods:
        cfgs = [_base_config(problem, problem_params, method, protocol, seed,
                             method_params=protocol.method_params.get(method))
                for seed in protocol.seeds]
        results = run_trials(cfgs, threads=protocol.threads)
        ok = [r for r in results if not r.crashed]
        crashes = len(results) - len(ok)
        if method == "unit_scal":
            for r in ok:
                interference_vals.extend(
                    rec.interference for rec in r.epochs
                    if rec.interference is not None)
        if not ok:
            summaries[method] = MethodSummary(
                delta_per_seed=[], delta_mean=float("nan"),
                delta_of_means=float("nan"), quantiles={},
                mean_weights=[], crashes=crashes, completed=0)
            continue
        per_seed_metrics = [r.test_metrics() for r in ok]
        deltas = [delta_mtm(tm, baseline) for tm in per_seed_metrics]
        mean_tm = _mean_task_metrics(per_seed_metrics)
        mean_metrics[method] = mean_tm
        weights = np.concatenate([np.vstack(r.weight_trace.epochs)
                                  for r in ok], axis=0)
        summaries[method] = MethodSummary(
            delta_per_seed=[float(d) for d in deltas],
            delta_mean=float(np.mean(deltas)),
            delta_of_means=float(delta_mtm(mean_tm, baseline)),
            quantiles=_quantiles(deltas),
            mean_weights=[float(w) for w in weights.mean(axis=0)],
            crashes=crashes, completed=len(ok))

    if len(mean_metrics) >= 2:
        names = list(mean_metrics)
        ranks = mean_rank([mean_metrics[m] for m in names])
        for name, rank in zip(names, ranks):
            summaries[name].mean_rank = float(rank)
    elif len(mean_metrics) == 1:
        summaries[next(iter(mean_metrics))].mean_rank = 1.0

    report = MetricReport(
        problem=problem, baseline=baseline, methods=summaries,
        interference=(float(np.mean(interference_vals))
                      if interference_vals else None))
    return report


@dataclass
class GridSearchResult:
    table: list
    selected: dict
    excluded: list
    final_trials: list
    final_test: list


def default_grids(method):
    grids = {"lr": DEFAULT_LR_GRID, "dropout": (0.0,), "weight_decay": (0.0,)}
    grids["method"] = {k: tuple(v) for k, v in METHOD_GRIDS.get(method, {}).items()}
    return grids


def grid_search(problem, method, grids=None, seeds_per_config=1,
                seeds_final=2, protocol: Protocol = None, problem_params=None,
                threads=1):
    """Exhaustive search over the grid, best-mean-validation selection with
    a deterministic tie-break (smaller lr, then dropout, then weight decay),
    then extra seeds on the winner."""
    protocol = protocol or Protocol()
    grids = grids or default_grids(method)
    method_grid = grids.get("method", {}) or {}
    lr_grid = grids.get("lr", DEFAULT_LR_GRID)
    dropout_grid = grids.get("dropout", (0.0,))
    wd_grid = grids.get("weight_decay", (0.0,))
    if not lr_grid or not dropout_grid or not wd_grid:
        raise ConfigError("grid axes must be nonempty")

    method_points = [{}]
    for key, values in method_grid.items():
        method_points = [dict(pt, **{key: v}) for pt in method_points
                         for v in values]

    table, excluded = [], []
    candidates = []
    for lr in lr_grid:
        for dropout in dropout_grid:
            for wd in wd_grid:
                for mp in method_points:
                    cfgs = [replace(_base_config(problem, problem_params,
                                                 method, protocol, seed,
                                                 method_params=mp),
                                    lr=lr, dropout=dropout, weight_decay=wd)
                            for seed in range(seeds_per_config)]
                    results = run_trials(cfgs, threads=threads)
                    ok = [r for r in results if not r.crashed]
                    point = {"lr": lr, "dropout": dropout,
                             "weight_decay": wd, "method_params": mp,
                             "crashes": len(results) - len(ok)}
                    if not ok:
                        excluded.append(point)
                        table.append(dict(point, score=None))
                        continue
                    score = float(np.mean(
                        [r.epochs[r.best_epoch].val_score for r in ok]))
                    point["score"] = score
                    table.append(point)
                    candidates.append(point)
    if not candidates:
        raise BalancingError("every grid point crashed")
    best = sorted(candidates,
                  key=lambda p: (-p["score"], p["lr"], p["dropout"],
                                 p["weight_decay"]))[0]

    final_cfgs = [replace(_base_config(problem, problem_params, method,
                                       protocol, seeds_per_config + j,
                                       method_params=best["method_params"]),
                          lr=best["lr"], dropout=best["dropout"],
                          weight_decay=best["weight_decay"])
                  for j in range(seeds_final)]
    final = run_trials(final_cfgs, threads=threads)
    final_test = [None if r.crashed else r.epochs[r.best_epoch].test
                  for r in final]
    return GridSearchResult(table=table, selected=best, excluded=excluded,
                            final_trials=final, final_test=final_test)


@dataclass
class ReplayPair:
    source: TrialResult
    replay: TrialResult
    fixed_weights: list


def extract_and_replay(cfg: TrialConfig, beta=0.9) -> ReplayPair:
    """Run the configured method, extract static weights from its trace
    (epoch means -> EMA -> last epoch), then rerun the same trial with the
    static weighter."""
    source = run_trial(cfg)
    if source.crashed:
        raise BalancingError(
            f"source trial crashed at step {source.crash_step}: {source.crash_reason}")
    wv = extract_fixed_weights(source.weight_trace, beta=beta)
    weights = [float(w) for w in wv.values]
    replay_cfg = replace(cfg, method="fixed",
                         method_params={"weights": weights})
    replay = run_trial(replay_cfg)
    return ReplayPair(source=source, replay=replay, fixed_weights=weights)
