"""Per-task learned rotations of the shared feature vector.

Rotations are Cayley transforms of skew-symmetric generators, so they are
exactly orthogonal by construction and need no re-projection. The rotation
loss aligns each task's normalized, rotated feature gradient with the mean
of the normalized gradients; its gradient flows to the generators only,
never into the main model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroGradientError


def cayley(generator):
    """R = (I - A)(I + A)^{-1} for skew-symmetric A; lands in SO(f)."""
    A = np.asarray(generator, dtype=float)
    n = A.shape[0]
    eye = np.eye(n)
    # (I - A) and (I + A)^{-1} commute, so either multiplication order works
    return np.linalg.solve(eye + A, eye - A)


@dataclass
class RotationSet:
    """Per-task skew generators with cached rotations and an lr scale."""

    generators: np.ndarray
    rotations: np.ndarray
    lr_scale: float = 0.1

    @classmethod
    def identity(cls, n_tasks, feature_dim, lr_scale=0.1):
        gens = np.zeros((n_tasks, feature_dim, feature_dim))
        rots = np.stack([np.eye(feature_dim)] * n_tasks)
        return cls(generators=gens, rotations=rots, lr_scale=lr_scale)

    @property
    def n_tasks(self):
        return self.generators.shape[0]

    @property
    def feature_dim(self):
        return self.generators.shape[1]

    def refresh(self):
        for i in range(self.n_tasks):
            self.rotations[i] = cayley(self.generators[i])


def rotate_features(rot: RotationSet, z, task):
    """Apply task's rotation to a feature vector; norm is preserved."""
    return rot.rotations[task] @ np.asarray(z, dtype=float)


def rotation_target(feature_grads):
    """Mean of the normalized per-task feature gradients.

    Returns (v, degenerate); degenerate is set when the normalized gradients
    cancel out (opposing tasks), leaving no usable target. A zero gradient
    row is an error naming the task.
    """
    G = np.atleast_2d(np.asarray(feature_grads, dtype=float))
    norms = np.linalg.norm(G, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise ZeroGradientError(int(bad[0]))
    v = (G / norms[:, None]).mean(axis=0)
    return v, bool(np.linalg.norm(v) < 1e-12)


def rotation_loss(rot: RotationSet, feature_grads, v):
    """Sum of squared distances between each rotated unit gradient and v."""
    G = np.atleast_2d(np.asarray(feature_grads, dtype=float))
    norms = np.linalg.norm(G, axis=1)
    total = 0.0
    for i in range(G.shape[0]):
        if norms[i] < 1e-12:
            continue
        r = rot.rotations[i] @ (G[i] / norms[i])
        total += float(np.sum((r - v) ** 2))
    return total


def rotation_gradients(rot: RotationSet, feature_grads, v):
    """Analytic gradient of the rotation loss w.r.t. each skew generator.

    With R = (I - A)(I + A)^{-1}, a perturbation dA gives
    dR = -(I + R) dA (I + A)^{-1}, so for P = dL/dR the generator gradient
    is -(I + R)^T P (I - A)^{-1}, projected back onto the skew subspace.
    """
    G = np.atleast_2d(np.asarray(feature_grads, dtype=float))
    norms = np.linalg.norm(G, axis=1)
    grads = np.zeros_like(rot.generators)
    eye = np.eye(rot.feature_dim)
    for i in range(G.shape[0]):
        if norms[i] < 1e-12:
            continue
        u = G[i] / norms[i]
        R = rot.rotations[i]
        P = 2.0 * np.outer(R @ u - v, u)
        full = -(eye + R).T @ P @ np.linalg.inv(eye - rot.generators[i])
        grads[i] = (full - full.T) / 2.0
    return grads


def rotation_step(rot: RotationSet, feature_grads, v, lr):
    """One gradient-descent step on the generators; rotations are rebuilt
    through the Cayley map so orthogonality is exact after every update."""
    grads = rotation_gradients(rot, feature_grads, v)
    rot.generators -= lr * grads
    rot.refresh()
    return rotation_loss(rot, feature_grads, v)
