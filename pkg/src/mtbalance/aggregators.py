"""Gradient-based task balancing: each method consumes the per-task shared
gradients (rows of a bundle) plus optional losses/state and returns one
combined update direction together with the effective per-task weights.

Reported weights are simplex-normalized so traces are comparable across
methods; raw coefficients (when a method has them) live in diagnostics.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, SingularMatrixError, ZeroGradientError
from .numerics import (gram, min_norm_in_hull, positive_fixed_point,
                       project_to_simplex, solve_linear)
from .weighters import SUM_TO_ONE, WeightVector

IMTL_WEIGHT_CLAMP = 1e3


@dataclass
class GradientBundle:
    """Per-task gradients of the shared parameters as an (N, d) matrix."""

    matrix: np.ndarray
    task_names: tuple
    norms: np.ndarray

    @classmethod
    def from_matrix(cls, matrix, task_names=None):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if not np.all(np.isfinite(matrix)):
            raise ValueError("gradient bundle contains non-finite entries")
        n = matrix.shape[0]
        if task_names is None:
            task_names = tuple(f"task{i}" for i in range(n))
        if len(task_names) != n:
            raise ValueError("one task name per gradient row required")
        norms = np.linalg.norm(matrix, axis=1)
        return cls(matrix=matrix, task_names=tuple(task_names), norms=norms)

    @property
    def n_tasks(self):
        return self.matrix.shape[0]

    def require_nonzero(self, floor=1e-12):
        bad = np.nonzero(self.norms < floor)[0]
        if bad.size:
            i = int(bad[0])
            raise ZeroGradientError(self.task_names[i])


@dataclass
class AggregationResult:
    direction: np.ndarray
    weights: WeightVector
    diagnostics: dict = field(default_factory=dict)


def _result(direction, weights, diagnostics):
    direction = np.asarray(direction, dtype=float)
    if not np.all(np.isfinite(direction)):
        raise ValueError("aggregated direction is non-finite")
    return AggregationResult(direction=direction, weights=weights,
                             diagnostics=diagnostics)


def mgda_ub(bundle: GradientBundle, max_iter=250, tol=1e-7):
    """Min-norm point of the gradient hull; the combined step is sum w_i g_i."""
    w, info = min_norm_in_hull(bundle.matrix, max_iter=max_iter, tol=tol)
    direction = w @ bundle.matrix
    return _result(direction, WeightVector(w, SUM_TO_ONE), dict(info))


def pcgrad(bundle: GradientBundle, rng):
    """Gradient surgery: project each task gradient off every gradient it
    conflicts with, visiting the others in a random order, then sum.

    Reported weights are the surviving-magnitude shares of the surgered
    gradients (the method itself has no weight notion)."""
    n = bundle.n_tasks
    if n < 2:
        raise ValueError("pcgrad needs at least two tasks")
    G = bundle.matrix
    sq_norms = bundle.norms ** 2
    surgered = np.empty_like(G)
    n_proj = 0
    for i in range(n):
        gi = G[i].copy()
        order = rng.permutation(n)
        for j in order:
            if j == i or sq_norms[j] <= 1e-24:
                continue
            dot = gi @ G[j]
            if dot < 0.0:
                gi -= (dot / sq_norms[j]) * G[j]
                n_proj += 1
        surgered[i] = gi
    direction = surgered.sum(axis=0)
    mags = np.linalg.norm(surgered, axis=1)
    total = mags.sum()
    w = mags / total if total > 0.0 else np.full(n, 1.0 / n)
    return _result(direction, WeightVector(w, SUM_TO_ONE),
                   {"projections": n_proj})


def graddrop(bundle: GradientBundle, rng, k=1.0, p=0.5):
    """Per-coordinate sign dropout driven by sign purity.

    Purity P = 0.5 (1 + sum_i g_i / sum_i |g_i|) per coordinate; a uniform
    draw keeps the positive contributions when U < f(P) with transfer
    f(P) = clip(0.5 + k (P - 0.5), 0, 1), and the negative ones otherwise.
    The leak p lets a fraction of every masked entry through, so pure-sign
    coordinates (P in {0, 1}) pass unchanged.
    """
    G = bundle.matrix
    n = bundle.n_tasks
    total = G.sum(axis=0)
    abs_total = np.abs(G).sum(axis=0)
    purity = np.where(abs_total > 0.0, 0.5 * (1.0 + total / np.where(abs_total > 0.0, abs_total, 1.0)), 0.5)
    transfer = np.clip(0.5 + k * (purity - 0.5), 0.0, 1.0)
    keep_positive = rng.random(G.shape[1]) < transfer
    base = np.where(keep_positive[None, :], G > 0.0, G < 0.0).astype(float)
    mask = p + (1.0 - p) * base
    kept = G * mask
    direction = kept.sum(axis=0)
    mass = np.abs(kept).sum(axis=1)
    mass_total = mass.sum()
    w = mass / mass_total if mass_total > 0.0 else np.full(n, 1.0 / n)
    return _result(direction, WeightVector(w, SUM_TO_ONE),
                   {"mean_purity": float(purity.mean())})


def edm(bundle: GradientBundle, max_iter=250, tol=1e-7):
    """Equiangular-style direction: min-norm point of the hull of the
    normalized gradients, rescaled by N / sum_i (1 / ||g_i||).

    For two tasks this reproduces the closed form
    d* = (1/||g1|| + 1/||g2||)^{-1} (g1/||g1|| + g2/||g2||) exactly.
    """
    bundle.require_nonzero()
    unit = bundle.matrix / bundle.norms[:, None]
    w, info = min_norm_in_hull(unit, max_iter=max_iter, tol=tol)
    scale = bundle.n_tasks / float((1.0 / bundle.norms).sum())
    direction = scale * (w @ unit)
    diag = dict(info)
    diag["scale"] = scale
    return _result(direction, WeightVector(w, SUM_TO_ONE), diag)


def imtl_g(bundle: GradientBundle, weight_clamp=IMTL_WEIGHT_CLAMP):
    """Equal-projection weighting: the combined gradient has the same
    unnormalized projection onto every task's unit gradient.

    Solves alpha_{2..N} from (D U^T)^T x = U g1 with U rows u1 - u_k and
    D rows g1 - g_k, then alpha_1 = 1 - sum(x). Weights may be negative;
    magnitudes above the clamp are clipped and flagged (the lack of bounds
    is this method's known failure mode on strongly conflicting tasks).
    """
    n = bundle.n_tasks
    if n < 2:
        raise ValueError("imtl_g needs at least two tasks")
    bundle.require_nonzero()
    G = bundle.matrix
    unit = G / bundle.norms[:, None]
    U = unit[0] - unit[1:]
    D = G[0] - G[1:]
    e = U @ G[0]
    B = D @ U.T
    try:
        x = solve_linear(B.T, e)
    except SingularMatrixError as err:
        raise DegenerateGeometryError(f"equal-projection system singular: {err}") from err
    alpha = np.concatenate(([1.0 - x.sum()], x))
    residual = float(np.linalg.norm(B.T @ x - e))
    clamped = bool(np.any(np.abs(alpha) > weight_clamp))
    if clamped:
        alpha = np.clip(alpha, -weight_clamp, weight_clamp)
        total = alpha.sum()
        if abs(total) > 1e-12:
            alpha = alpha / total
    direction = alpha @ G
    return _result(direction, WeightVector(alpha, SUM_TO_ONE),
                   {"residual": residual, "clamped": clamped,
                    "negative_weights": bool(np.any(alpha < 0.0))})


def _cagrad_objective(w, K, b, sqrt_phi):
    quad = float(w @ K @ w)
    return float(w @ b) + sqrt_phi * np.sqrt(max(quad, 0.0))


def cagrad(bundle: GradientBundle, c=0.5, steps=100, sweeps=60):
    """Conflict-averse step: start from the average gradient g0 and add a
    correction of magnitude c ||g0|| along the minimizer of
    g_w . g0 + sqrt(phi) ||g_w|| over the simplex, phi = c^2 ||g0||^2.

    The inner problem runs projected gradient descent (step 0.1/L with L
    re-estimated from the local curvature), then tightens the point with
    pairwise mass-exchange sweeps: exact ternary line searches along every
    e_i - e_j direction until no exchange improves the objective. c = 0
    returns g0 unchanged.
    """
    if not 0.0 <= c < 1.0:
        raise ValueError("c must lie in [0, 1)")
    n = bundle.n_tasks
    G = bundle.matrix
    g0 = G.mean(axis=0)
    uniform = np.full(n, 1.0 / n)
    if c == 0.0 or n == 1:
        return _result(g0, WeightVector(uniform, SUM_TO_ONE),
                       {"objective": float(g0 @ g0), "fallback": False})
    K = gram(G)
    b = K @ uniform
    g0_norm = float(np.sqrt(max(uniform @ b, 0.0)))
    sqrt_phi = c * g0_norm
    lmax = max(float(np.linalg.eigvalsh(K)[-1]), 1e-12)

    w = uniform.copy()
    for _ in range(steps):
        quad = max(float(w @ K @ w), 1e-24)
        gw_norm = np.sqrt(quad)
        grad = b + sqrt_phi * (K @ w) / gw_norm
        lips = lmax * (1.0 + sqrt_phi / gw_norm)
        w = project_to_simplex(w - 0.1 / lips * grad)

    best = _cagrad_objective(w, K, b, sqrt_phi)
    for _ in range(sweeps):
        improved = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                lo, hi = -w[i], w[j]  # feasible mass exchange j -> i
                if hi - lo < 1e-18:
                    continue
                d = np.zeros(n)
                d[i], d[j] = 1.0, -1.0
                for _ in range(60):
                    m1 = lo + (hi - lo) / 3.0
                    m2 = hi - (hi - lo) / 3.0
                    if (_cagrad_objective(w + m1 * d, K, b, sqrt_phi)
                            <= _cagrad_objective(w + m2 * d, K, b, sqrt_phi)):
                        hi = m2
                    else:
                        lo = m1
                cand = np.maximum(w + 0.5 * (lo + hi) * d, 0.0)
                cand /= cand.sum()
                val = _cagrad_objective(cand, K, b, sqrt_phi)
                if val < best - 1e-18:
                    improved += best - val
                    best, w = val, cand
        if improved < 1e-15:
            break

    gw = w @ G
    gw_norm = float(np.linalg.norm(gw))
    if gw_norm < 1e-12:
        return _result(g0, WeightVector(w, SUM_TO_ONE),
                       {"objective": best, "fallback": True})
    direction = g0 + (sqrt_phi / gw_norm) * gw
    return _result(direction, WeightVector(w, SUM_TO_ONE),
                   {"objective": best, "fallback": False})


def nash_mtl(bundle: GradientBundle, iters=20):
    """Bargaining-style weights: positive alpha solving (G G^T) alpha = 1/alpha,
    combined step sum alpha_i g_i. The solve residual is reported so callers
    can audit the fixed iteration budget."""
    bundle.require_nonzero()
    K = gram(bundle.matrix)
    try:
        alpha, residual = positive_fixed_point(K, iters=iters)
    except ZeroGradientError as err:
        raise ZeroGradientError(bundle.task_names[err.task]) from err
    direction = alpha @ bundle.matrix
    return _result(direction, WeightVector(alpha / alpha.sum(), SUM_TO_ONE),
                   {"residual": residual, "alpha": alpha})


@dataclass
class CdttState:
    """Ring buffers of recent gradient norms plus the previous norm statistic;
    single-owner per trial."""

    window: int = 5
    alpha_tension: float = 0.6
    histories: list = field(default_factory=list)
    prev_zeta: np.ndarray = None

    @classmethod
    def create(cls, n_tasks, window=5, alpha_tension=0.6):
        if window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= alpha_tension <= 1.0:
            raise ValueError("alpha_tension must lie in [0, 1]")
        return cls(window=window, alpha_tension=alpha_tension,
                   histories=[deque(maxlen=window) for _ in range(n_tasks)])


def cdtt(bundle: GradientBundle, losses, state: CdttState):
    """Tension-corrected equiangular step.

    Starting from the edm direction d*, each task adds a unit pull
    (g_i - d*) / ||g_i - d*|| scaled by
    c_i = alpha / (1 + exp(-delta_i e + e)) + 1 - alpha with
    delta_i = zeta_i(t) / zeta_i(t-1) + log10(loss_i), where zeta is the
    running mean of the task's recent gradient norms. The first step uses
    ratio 1. Tasks whose gradient coincides with d* are skipped and flagged.
    """
    n = bundle.n_tasks
    if len(state.histories) != n:
        raise ValueError("state was created for a different task count")
    losses = np.asarray(losses, dtype=float)
    base = edm(bundle)
    d = base.direction

    for i in range(n):
        state.histories[i].append(float(bundle.norms[i]))
    zeta = np.array([np.mean(h) for h in state.histories])
    if state.prev_zeta is None:
        ratio = np.ones(n)
    else:
        prev = np.where(np.abs(state.prev_zeta) > 1e-300, state.prev_zeta, 1.0)
        ratio = np.abs(zeta) / np.abs(prev)
    with np.errstate(divide="ignore"):
        delta = ratio + np.log10(losses)
    exponent = np.clip(-delta * np.e + np.e, -700.0, 700.0)
    c = state.alpha_tension / (1.0 + np.exp(exponent)) + 1.0 - state.alpha_tension

    tension = np.zeros_like(d)
    skipped = []
    for i in range(n):
        pull = bundle.matrix[i] - d
        pull_norm = float(np.linalg.norm(pull))
        if pull_norm < 1e-12:
            skipped.append(bundle.task_names[i])
            continue
        tension += c[i] * pull / pull_norm
    state.prev_zeta = zeta

    diag = dict(base.diagnostics)
    diag.update({"tension_coeffs": c, "skipped_tasks": skipped})
    return _result(d + tension, base.weights, diag)
