"""Loss-based task weighting: methods that map loss values (plus a little
state) to a weight vector applied to the scalarized loss before a single
backward pass, along with the trivial baselines."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonPositiveLossError

SUM_TO_ONE = "sum_to_one"
SUM_TO_N = "sum_to_N"
FREE = "free"
_CONVENTIONS = (SUM_TO_ONE, SUM_TO_N, FREE)


@dataclass
class WeightVector:
    """Per-task weights with a declared normalization convention."""

    values: np.ndarray
    convention: str = FREE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")
        if self.convention not in _CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")

    @property
    def n_tasks(self):
        return self.values.size

    def normalized(self):
        """Weights rescaled to the probability simplex."""
        total = self.values.sum()
        if total <= 0.0:
            return np.full(self.n_tasks, 1.0 / self.n_tasks)
        return self.values / total


def _require_positive(losses, what="loss"):
    losses = np.asarray(losses, dtype=float)
    bad = np.nonzero(losses <= 0.0)[0]
    if bad.size:
        raise NonPositiveLossError(int(bad[0]), float(losses[bad[0]]))
    return losses


def unit_scal(losses):
    """Uniform weights: plain sum of the task losses."""
    n = len(losses)
    return WeightVector(np.ones(n), SUM_TO_N)


def si(losses):
    """Scale-invariant weighting: gradient of sum_i log(loss_i), i.e. 1/loss."""
    losses = _require_positive(losses)
    return WeightVector(1.0 / losses, FREE)


def rlw(rng, distribution, n_tasks):
    """Random loss weighting, redrawn every step.

    'normal' takes the softmax of standard normal draws, 'dirichlet' draws
    from Dirichlet(1, ..., 1); both land on the simplex.
    """
    if distribution == "normal":
        z = rng.standard_normal(n_tasks)
        z = np.exp(z - z.max())
        return WeightVector(z / z.sum(), SUM_TO_ONE)
    if distribution == "dirichlet":
        return WeightVector(rng.dirichlet(np.ones(n_tasks)), SUM_TO_ONE)
    raise ValueError(f"unknown rlw distribution {distribution!r}")


@dataclass
class UwState:
    """Per-task log-variance parameters, learned jointly with the model."""

    s: np.ndarray

    @classmethod
    def create(cls, n_tasks):
        return cls(s=np.zeros(n_tasks))


def uw_loss(losses, state: UwState):
    """Homoscedastic-uncertainty loss: sum_i exp(-s_i) l_i / 2 + s_i / 2.

    Returns (total, weights); the effective loss weights are exp(-s_i)/2.
    Gradients for s flow through the total, see uw_grad_s.
    """
    losses = np.asarray(losses, dtype=float)
    w = np.exp(-state.s) / 2.0
    total = float(np.sum(w * losses + state.s / 2.0))
    return total, WeightVector(w, FREE)


def uw_grad_s(losses, state: UwState):
    """d(total)/d(s): -exp(-s) l / 2 + 1/2, zero where exp(s) = l."""
    losses = np.asarray(losses, dtype=float)
    return -np.exp(-state.s) * losses / 2.0 + 0.5


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class FamoState:
    """Logits whose softmax, divided by the losses, yields task weights."""

    logits: np.ndarray
    gamma: float = 0.001
    logit_lr: float = 0.025
    prev_losses: np.ndarray = field(default=None)

    @classmethod
    def create(cls, n_tasks, gamma=0.001, logit_lr=0.025):
        return cls(logits=np.zeros(n_tasks), gamma=gamma, logit_lr=logit_lr)


def famo_weights(state: FamoState, losses):
    """w_i proportional to softmax(logits)_i / loss_i, normalized to sum 1.

    Non-positive losses are surfaced as errors (the method divides by the
    loss and logs it in the update), never clamped away.
    """
    losses = _require_positive(losses)
    raw = _softmax(state.logits) / losses
    return WeightVector(raw / raw.sum(), SUM_TO_ONE)


def famo_update(state: FamoState, losses_t, losses_t1):
    """Logit update from the observed loss improvement.

    delta = J_z @ (log l_t - log l_{t+1}) with the analytic softmax Jacobian
    J_z = diag(z) - z z^T, then logits <- logits - lr (delta + gamma logits).
    Returns a new state; the caller owns when to apply it.
    """
    losses_t = _require_positive(losses_t)
    losses_t1 = _require_positive(losses_t1)
    z = _softmax(state.logits)
    jac = np.diag(z) - np.outer(z, z)
    delta = jac @ (np.log(losses_t) - np.log(losses_t1))
    logits = state.logits - state.logit_lr * (delta + state.gamma * state.logits)
    return replace(state, logits=logits, prev_losses=np.array(losses_t1))


def softmax_jacobian(logits):
    """d softmax_i / d logit_j = z_i (delta_ij - z_j)."""
    z = _softmax(np.asarray(logits, dtype=float))
    return np.diag(z) - np.outer(z, z)


def fixed(weights: WeightVector, losses=None):
    """Static weights: returns the provided vector unchanged every step."""
    return WeightVector(np.array(weights.values), weights.convention)


def auto_lambda_update(weights: WeightVector, spec, params, train_inputs,
                       train_targets, val_inputs, val_targets, lr, aux_lr,
                       floor=1e-4):
    """First-order meta-update of the task weights.

    Simulates one plain-SGD step with the current weighted task gradients,
    then moves each weight against the gradient of the (unweighted)
    validation loss through that step. Second-order terms are dropped, so
    the meta-gradient is -lr * <grad L_val(theta'), grad l_i(theta)>.

    Weights are clipped to stay >= floor. A non-finite meta-gradient skips
    the update and reports it in the info dict instead of raising.
    """
    from . import model  # deferred: weighters is imported by model's deps

    lam = np.asarray(weights.values, dtype=float)
    if np.any(lam <= 0.0):
        raise ValueError("auto-lambda weights must stay positive")
    info = {"skipped": False}
    if aux_lr == 0.0:
        info["meta_grad"] = np.zeros_like(lam)
        return WeightVector(lam, FREE), info

    state = model.forward(spec, params, train_inputs, train_targets, train=False)
    grads = model.backward_per_task(spec, params, state)
    full = model.per_task_full_gradients(spec, grads)
    lookahead = params - lr * (lam @ full)

    val_state = model.forward(spec, lookahead, val_inputs, val_targets, train=False)
    val_grads = model.backward_per_task(spec, lookahead, val_state)
    val_full = model.per_task_full_gradients(spec, val_grads).sum(axis=0)

    meta = -lr * (full @ val_full)
    if not np.all(np.isfinite(meta)):
        info["skipped"] = True
        return WeightVector(lam, FREE), info
    info["meta_grad"] = meta
    new = np.maximum(lam - aux_lr * meta, floor)
    return WeightVector(new, FREE), info
