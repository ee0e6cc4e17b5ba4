"""Shared-encoder / multi-head feedforward network with hand-written
reverse-mode gradients, inverted dropout, decoupled weight decay and Adam.

The parameter vector is flat: first the encoder (shared) block, then one
block per task head. Task-weighting methods act on the shared block only;
head gradients always pass through with weight one.

Conventions: activations are row-batched (y = x @ W.T + b), losses are
mean-over-batch and mean-over-output-dims so cross-entropy and squared
error live on comparable scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregators import GradientBundle
from .errors import NonFiniteLossError

CROSS_ENTROPY = "cross_entropy"
MEAN_SQUARED_ERROR = "mean_squared_error"

_ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class HeadSpec:
    """One task head: optional hidden widths, output layer and loss kind."""

    output_dim: int
    loss: str
    hidden: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.loss not in (CROSS_ENTROPY, MEAN_SQUARED_ERROR):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.output_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("head widths must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    heads: tuple
    encoder: tuple = ((64, "tanh"), (32, "tanh"))
    dropout_p: float = 0.0

    def __post_init__(self):
        if not self.heads:
            raise ValueError("at least one head required")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        for width, act in self.encoder:
            if width < 1:
                raise ValueError("encoder widths must be >= 1")
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_tasks(self):
        return len(self.heads)

    @property
    def feature_dim(self):
        return self.encoder[-1][0] if self.encoder else self.input_dim

    def task_names(self):
        return tuple(h.name or f"task{i}" for i, h in enumerate(self.heads))


class ParamLayout:
    """Slices of the flat parameter vector: encoder affines, then per-head
    affines. Weight matrices are stored row-major as (fan_out, fan_in)."""

    def __init__(self, spec: NetworkSpec):
        offset = 0

        def affine(fan_in, fan_out):
            nonlocal offset
            w = slice(offset, offset + fan_out * fan_in)
            offset += fan_out * fan_in
            b = slice(offset, offset + fan_out)
            offset += fan_out
            return (w, b, fan_in, fan_out)

        self.encoder = []
        prev = spec.input_dim
        for width, _act in spec.encoder:
            self.encoder.append(affine(prev, width))
            prev = width
        self.shared = slice(0, offset)
        self.shared_size = offset

        self.heads = []
        self.head_blocks = []
        for head in spec.heads:
            start = offset
            prev = spec.feature_dim
            layers = []
            for width in head.hidden:
                layers.append(affine(prev, width))
                prev = width
            layers.append(affine(prev, head.output_dim))
            self.heads.append(layers)
            self.head_blocks.append(slice(start, offset))
        self.total_size = offset

    @staticmethod
    def weight(params, aff):
        w, _b, fan_in, fan_out = aff
        return params[w].reshape(fan_out, fan_in)

    @staticmethod
    def bias(params, aff):
        return params[aff[1]]


def layout_for(spec):
    return ParamLayout(spec)


def init_params(spec, rng):
    """Gaussian fan-in scaled weights, zero biases."""
    layout = ParamLayout(spec)
    params = np.zeros(layout.total_size)
    for aff in layout.encoder + [a for head in layout.heads for a in head]:
        w, _b, fan_in, fan_out = aff
        params[w] = (rng.standard_normal(fan_out * fan_in) / np.sqrt(fan_in))
    return params


def _act_forward(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_deriv(name, out):
    # derivative expressed through the activation output
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (out > 0.0).astype(float)
    return np.ones_like(out)


@dataclass
class ForwardState:
    """Everything backward needs: per-task outputs/losses plus the layer
    caches and dropout masks of the pass that produced them."""

    outputs: list
    losses: np.ndarray
    enc_inputs: list
    enc_acts: list
    enc_masks: list
    features: np.ndarray
    head_inputs: list
    head_caches: list
    inputs: np.ndarray
    targets: tuple
    train: bool
    feature_maps: list = None


def _dropout_mask(rng, shape, p):
    return (rng.random(shape) >= p) / (1.0 - p)


def forward(spec, params, inputs, targets, rng=None, train=False,
            feature_maps=None, reuse_from=None):
    """Run the network on a batch and compute per-task losses.

    In train mode (and dropout_p > 0) inverted-scale dropout masks are drawn
    from rng and kept in the returned state so backward sees the same pass;
    reuse_from replays the masks of a previous state instead (same batch
    shape required). feature_maps optionally supplies one matrix per task
    applied to the shared features before that task's head (used for
    learned rotations).
    """
    layout = ParamLayout(spec)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[1] != spec.input_dim:
        raise ValueError(f"batch has {inputs.shape[1]} columns, expected {spec.input_dim}")
    if len(targets) != spec.n_tasks:
        raise ValueError("one target array per task required")
    use_dropout = train and spec.dropout_p > 0.0
    if use_dropout and rng is None and reuse_from is None:
        raise ValueError("train-mode dropout needs an rng")

    h = inputs
    enc_inputs, enc_acts, enc_masks = [], [], []
    for li, (aff, (_w, act)) in enumerate(zip(layout.encoder, spec.encoder)):
        enc_inputs.append(h)
        a = h @ ParamLayout.weight(params, aff).T + ParamLayout.bias(params, aff)
        t = _act_forward(act, a)
        enc_acts.append(t)
        if use_dropout:
            if reuse_from is not None:
                mask = reuse_from.enc_masks[li]
            else:
                mask = _dropout_mask(rng, t.shape, spec.dropout_p)
            enc_masks.append(mask)
            h = t * mask
        else:
            enc_masks.append(None)
            h = t
    features = h

    outputs, losses = [], np.empty(spec.n_tasks)
    head_inputs, head_caches = [], []
    names = spec.task_names()
    for i, head in enumerate(spec.heads):
        z = features if feature_maps is None else features @ feature_maps[i].T
        head_inputs.append(z)
        hi_inputs, hi_acts, hi_masks = [], [], []
        h = z
        affines = layout.heads[i]
        for li, aff in enumerate(affines[:-1]):
            hi_inputs.append(h)
            a = h @ ParamLayout.weight(params, aff).T + ParamLayout.bias(params, aff)
            t = _act_forward("tanh", a)
            hi_acts.append(t)
            if use_dropout:
                if reuse_from is not None:
                    mask = reuse_from.head_caches[i][2][li]
                else:
                    mask = _dropout_mask(rng, t.shape, spec.dropout_p)
                hi_masks.append(mask)
                h = t * mask
            else:
                hi_masks.append(None)
                h = t
        last = affines[-1]
        hi_inputs.append(h)
        out = h @ ParamLayout.weight(params, last).T + ParamLayout.bias(params, last)
        outputs.append(out)
        head_caches.append((hi_inputs, hi_acts, hi_masks))

        loss = _loss_value(head.loss, out, targets[i])
        if not np.isfinite(loss):
            raise NonFiniteLossError(names[i], loss)
        losses[i] = loss

    return ForwardState(outputs=outputs, losses=losses, enc_inputs=enc_inputs,
                        enc_acts=enc_acts, enc_masks=enc_masks,
                        features=features, head_inputs=head_inputs,
                        head_caches=head_caches, inputs=inputs,
                        targets=tuple(targets), train=train,
                        feature_maps=feature_maps)


def _loss_value(kind, out, target):
    if kind == CROSS_ENTROPY:
        target = np.asarray(target)
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(out.shape[0]), target]
        return float(np.mean(logz - picked))
    diff = out - np.asarray(target, dtype=float)
    return float(np.mean(diff * diff))


def _loss_grad(kind, out, target):
    if kind == CROSS_ENTROPY:
        target = np.asarray(target)
        shifted = out - out.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        g = probs
        g[np.arange(out.shape[0]), target] -= 1.0
        return g / out.shape[0]
    diff = out - np.asarray(target, dtype=float)
    return 2.0 * diff / diff.size


def _head_backward(spec, params, layout, state, task):
    """Backprop one task's loss through its head.

    Returns (head_grad_vector, dfeatures) where dfeatures is the (B, f)
    gradient with respect to the shared features (pulled back through the
    task's feature map when one was used)."""
    head = spec.heads[task]
    affines = layout.heads[task]
    hi_inputs, hi_acts, hi_masks = state.head_caches[task]
    block = layout.head_blocks[task]
    grad = np.zeros(block.stop - block.start)
    base = block.start

    d = _loss_grad(head.loss, state.outputs[task], state.targets[task])
    last = affines[-1]
    w_sl, b_sl, fan_in, fan_out = last
    grad[w_sl.start - base:w_sl.stop - base] = (d.T @ hi_inputs[-1]).ravel()
    grad[b_sl.start - base:b_sl.stop - base] = d.sum(axis=0)
    d = d @ ParamLayout.weight(params, last)

    for li in range(len(affines) - 2, -1, -1):
        aff = affines[li]
        if hi_masks[li] is not None:
            d = d * hi_masks[li]
        d = d * _act_deriv("tanh", hi_acts[li])
        w_sl, b_sl, fan_in, fan_out = aff
        grad[w_sl.start - base:w_sl.stop - base] = (d.T @ hi_inputs[li]).ravel()
        grad[b_sl.start - base:b_sl.stop - base] = d.sum(axis=0)
        d = d @ ParamLayout.weight(params, aff)

    if state.feature_maps is not None:
        d = d @ state.feature_maps[task]
    return grad, d


def _encoder_backward(spec, params, layout, state, dfeatures):
    """Backprop an upstream feature gradient through the shared encoder."""
    grad = np.zeros(layout.shared_size)
    d = dfeatures
    for li in range(len(layout.encoder) - 1, -1, -1):
        aff = layout.encoder[li]
        act = spec.encoder[li][1]
        if state.enc_masks[li] is not None:
            d = d * state.enc_masks[li]
        d = d * _act_deriv(act, state.enc_acts[li])
        w_sl, b_sl, _fi, _fo = aff
        grad[w_sl] = (d.T @ state.enc_inputs[li]).ravel()
        grad[b_sl] = d.sum(axis=0)
        d = d @ ParamLayout.weight(params, aff)
    return grad


@dataclass
class TaskGradients:
    """Per-task gradients from one backward sweep: shared-parameter rows,
    per-task head gradients, and the summed feature-space gradients."""

    bundle: GradientBundle
    head_grads: list
    feature_grads: np.ndarray


def backward_per_task(spec, params, state):
    """One backward pass per task: row i of the bundle is d(loss_i)/d(shared)."""
    layout = ParamLayout(spec)
    n = spec.n_tasks
    rows = np.empty((n, layout.shared_size))
    head_grads = []
    feature_grads = np.empty((n, spec.feature_dim))
    for i in range(n):
        hgrad, dz = _head_backward(spec, params, layout, state, i)
        head_grads.append(hgrad)
        feature_grads[i] = dz.sum(axis=0)
        rows[i] = _encoder_backward(spec, params, layout, state, dz)
    bundle = GradientBundle.from_matrix(rows, spec.task_names())
    return TaskGradients(bundle=bundle, head_grads=head_grads,
                         feature_grads=feature_grads)


def backward_weighted(spec, params, state, weights):
    """Gradient of sum_i w_i * loss_i in one encoder pass (full flat vector)."""
    layout = ParamLayout(spec)
    weights = np.asarray(weights, dtype=float)
    grad = np.zeros(layout.total_size)
    dz_total = np.zeros_like(state.features)
    for i in range(spec.n_tasks):
        hgrad, dz = _head_backward(spec, params, layout, state, i)
        grad[layout.head_blocks[i]] = weights[i] * hgrad
        dz_total += weights[i] * dz
    grad[layout.shared] = _encoder_backward(spec, params, layout, state, dz_total)
    return grad


def assemble_full_gradient(spec, task_grads: TaskGradients, direction,
                           head_weights=None):
    """Flat gradient with the shared block replaced by ``direction`` and each
    head block taken from its own task (optionally scaled)."""
    layout = ParamLayout(spec)
    grad = np.zeros(layout.total_size)
    grad[layout.shared] = direction
    for i, hg in enumerate(task_grads.head_grads):
        w = 1.0 if head_weights is None else float(head_weights[i])
        grad[layout.head_blocks[i]] = w * hg
    return grad


def per_task_full_gradients(spec, task_grads: TaskGradients):
    """(N, total) matrix: row i is the gradient of loss_i over all params."""
    layout = ParamLayout(spec)
    n = len(task_grads.head_grads)
    full = np.zeros((n, layout.total_size))
    full[:, layout.shared] = task_grads.bundle.matrix
    for i, hg in enumerate(task_grads.head_grads):
        full[i, layout.head_blocks[i]] = hg
    return full


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    step: int = 0

    @classmethod
    def create(cls, n_params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999,
               eps=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   weight_decay=weight_decay, m=np.zeros(n_params),
                   v=np.zeros(n_params), step=0)


def adam_step(state: AdamState, params, grad):
    """Bias-corrected Adam with decoupled weight decay; returns new params."""
    grad = np.asarray(grad, dtype=float)
    if grad.size != params.size:
        raise ValueError("gradient length does not match parameter length")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    decayed = params * (1.0 - state.lr * state.weight_decay)
    return decayed - state.lr * mhat / (np.sqrt(vhat) + state.eps)
