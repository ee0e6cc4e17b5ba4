"""Desk-scale multi-task problem generators plus overlapped-digit ingestion
from IDX files.

Three synthetic regimes mirror the situations the toolkit is built to
study: two exchangeable classification tasks, a classification task paired
with a reconstruction task whose gradients live on a different scale, and
an N-task regression family whose ground-truth directions have a
controllable pairwise cosine (the conflict knob).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IdxFormatError
from .model import CROSS_ENTROPY, MEAN_SQUARED_ERROR

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CANVAS = 36
DIGIT = 28
RIGHT_OFFSET = 8


@dataclass(frozen=True)
class TaskSpec:
    """What a head must produce for one task and how it is scored."""

    name: str
    loss: str
    output_dim: int

    @property
    def metric_name(self):
        return "accuracy" if self.loss == CROSS_ENTROPY else "mse"

    @property
    def lower_is_better(self):
        return self.loss != CROSS_ENTROPY


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: tuple
    split: str
    tasks: tuple

    def __post_init__(self):
        n = self.inputs.shape[0]
        for t in self.targets:
            if t.shape[0] != n:
                raise ValueError("target row count disagrees with inputs")
        if len(self.targets) != len(self.tasks):
            raise ValueError("one target array per task required")

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    def subset_tasks(self, indices):
        return Dataset(inputs=self.inputs,
                       targets=tuple(self.targets[i] for i in indices),
                       split=self.split,
                       tasks=tuple(self.tasks[i] for i in indices))


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset
    test: Dataset
    meta: dict = field(default_factory=dict)

    @property
    def tasks(self):
        return self.train.tasks

    def subset_tasks(self, indices):
        return DatasetSplits(train=self.train.subset_tasks(indices),
                             val=self.val.subset_tasks(indices),
                             test=self.test.subset_tasks(indices),
                             meta=dict(self.meta))


def split_rows(n, rng, val_frac, test_frac):
    """Disjoint shuffled index sets; val/test sizes are exact floors."""
    n_val = int(n * val_frac)
    n_test = int(n * test_frac)
    if n_val + n_test >= n:
        raise ValueError("splits leave no training data")
    perm = rng.permutation(n)
    val = perm[:n_val]
    test = perm[n_val:n_val + n_test]
    train = perm[n_val + n_test:]
    return train, val, test


def _make_splits(inputs, targets, tasks, rng, val_frac, test_frac, meta=None):
    train_idx, val_idx, test_idx = split_rows(inputs.shape[0], rng, val_frac, test_frac)

    def take(idx, split):
        return Dataset(inputs=inputs[idx],
                       targets=tuple(t[idx] for t in targets),
                       split=split, tasks=tasks)

    return DatasetSplits(train=take(train_idx, "train"),
                         val=take(val_idx, "val"),
                         test=take(test_idx, "test"),
                         meta=meta or {})


def symmetric_two_task(rng, size, n_classes=4, block_dim=6, noise=0.35,
                       val_frac=1 / 6, test_frac=1 / 6):
    """Two exchangeable classification tasks over shared inputs.

    Each task owns one block of the input built from the same class
    prototypes with iid noise, and labels are drawn iid uniform, so the two
    task views are identically distributed by construction.
    """
    prototypes = rng.standard_normal((n_classes, block_dim))
    y1 = rng.integers(0, n_classes, size)
    y2 = rng.integers(0, n_classes, size)
    block1 = prototypes[y1] + noise * rng.standard_normal((size, block_dim))
    block2 = prototypes[y2] + noise * rng.standard_normal((size, block_dim))
    inputs = np.hstack([block1, block2])
    tasks = (TaskSpec("cls_a", CROSS_ENTROPY, n_classes),
             TaskSpec("cls_b", CROSS_ENTROPY, n_classes))
    return _make_splits(inputs, (y1, y2), tasks, rng, val_frac, test_frac,
                        meta={"prototypes": prototypes})


def mixed_norm_two_task(rng, size, n_classes=6, input_dim=16, noise=0.25,
                        recon_scale=4.0, val_frac=1 / 6, test_frac=1 / 6):
    """Cross-entropy classification paired with squared-error reconstruction
    of the (optionally amplified) input, so the two tasks produce gradients
    on visibly different scales."""
    prototypes = rng.standard_normal((n_classes, input_dim))
    labels = rng.integers(0, n_classes, size)
    inputs = prototypes[labels] + noise * rng.standard_normal((size, input_dim))
    recon = recon_scale * inputs
    tasks = (TaskSpec("classify", CROSS_ENTROPY, n_classes),
             TaskSpec("reconstruct", MEAN_SQUARED_ERROR, input_dim))
    return _make_splits(inputs, (labels, recon), tasks, rng, val_frac,
                        test_frac, meta={"recon_scale": recon_scale})


@dataclass(frozen=True)
class ConflictSpec:
    """Controls for the conflict-knob regression family."""

    n_tasks: int
    cosine: float
    noise: float = 0.1
    input_dim: int = 12

    def __post_init__(self):
        if self.n_tasks < 2:
            raise ValueError("need at least two tasks")
        if self.input_dim < self.n_tasks:
            raise ValueError("input_dim must be >= n_tasks")
        lo = -1.0 / (self.n_tasks - 1) + 1e-9
        if not lo <= self.cosine <= 1.0:
            raise ValueError(f"cosine {self.cosine} infeasible for {self.n_tasks} unit vectors")


def conflict_regression(spec: ConflictSpec, rng, size, val_frac=1 / 6,
                        test_frac=1 / 6):
    """N linear-plus-noise regression tasks whose true weight vectors have
    pairwise cosine exactly spec.cosine (built by factoring the target Gram
    matrix through an orthonormal basis)."""
    n, kappa = spec.n_tasks, spec.cosine
    gram_target = (1.0 - kappa) * np.eye(n) + kappa * np.ones((n, n))
    evals, evecs = np.linalg.eigh(gram_target)
    factor = np.sqrt(np.maximum(evals, 0.0))[:, None] * evecs.T
    basis, _ = np.linalg.qr(rng.standard_normal((spec.input_dim, n)))
    W = basis @ factor  # columns: unit task vectors with pairwise cosine kappa

    inputs = rng.standard_normal((size, spec.input_dim))
    clean = inputs @ W
    targets = tuple((clean[:, i] + spec.noise * rng.standard_normal(size))[:, None]
                    for i in range(n))
    tasks = tuple(TaskSpec(f"reg_{i}", MEAN_SQUARED_ERROR, 1) for i in range(n))
    return _make_splits(inputs, targets, tasks, rng, val_frac, test_frac,
                        meta={"task_vectors": W, "noise": spec.noise,
                              "cosine": kappa})


def _read_exact(fh, count, path):
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(f"{path}: truncated (wanted {count} bytes, got {len(data)})")
    return data


def read_idx_images(path):
    """Big-endian IDX image file -> float array (count, rows, cols) in [0, 1]."""
    with open(path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, path))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
        raw = _read_exact(fh, count * rows * cols, path)
        extra = fh.read(1)
        if extra:
            raise IdxFormatError(f"{path}: trailing bytes after pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    return pixels.astype(float) / 255.0


def read_idx_labels(path):
    """Big-endian IDX label file -> int array (count,)."""
    with open(path, "rb") as fh:
        magic, count = struct.unpack(">II", _read_exact(fh, 8, path))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
        raw = _read_exact(fh, count, path)
        extra = fh.read(1)
        if extra:
            raise IdxFormatError(f"{path}: trailing bytes after label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def compose_pair(left, right):
    """Overlap two digit images on a CANVAS x CANVAS grid: left at the top
    left corner, right offset by (RIGHT_OFFSET, RIGHT_OFFSET), combined by
    per-pixel maximum."""
    canvas = np.zeros(left.shape[:-2] + (CANVAS, CANVAS))
    canvas[..., :DIGIT, :DIGIT] = left
    region = canvas[..., RIGHT_OFFSET:RIGHT_OFFSET + DIGIT,
                    RIGHT_OFFSET:RIGHT_OFFSET + DIGIT]
    np.maximum(region, right, out=region)
    return canvas


def downscale_bilinear(images, out_size=DIGIT):
    """Bilinear resample of (..., CANVAS, CANVAS) images to out_size square.

    Sample points are pixel centers, edges clamped, so outputs stay inside
    the input value range."""
    src = images.shape[-1]
    coords = (np.arange(out_size) + 0.5) * src / out_size - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, src - 1)
    hi = np.clip(lo + 1, 0, src - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)

    rows = images[..., lo, :] * (1.0 - frac)[:, None] + images[..., hi, :] * frac[:, None]
    out = rows[..., :, lo] * (1.0 - frac) + rows[..., :, hi] * frac
    return out


def load_multimnist(image_path, label_path, rng, tasks=("CL", "RR"),
                    size=None, val_frac=1 / 6, test_frac=1 / 6):
    """Overlapped-digit dataset from IDX files.

    Each sample pairs two source digits, composes them on a 36x36 canvas by
    per-pixel max and downscales back to 28x28. Task codes select targets:
    CL/CR classify the left/right digit, RL/RR reconstruct the left/right
    digit rendered alone on the same canvas pipeline.
    """
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}")
    if images.shape[1:] != (DIGIT, DIGIT):
        raise IdxFormatError(f"expected {DIGIT}x{DIGIT} digits, got {images.shape[1:]}")
    for code in tasks:
        if code not in ("CL", "CR", "RL", "RR"):
            raise ValueError(f"unknown task code {code!r}")

    n = images.shape[0] if size is None else min(size, images.shape[0])
    left_idx = rng.permutation(images.shape[0])[:n]
    right_idx = rng.permutation(images.shape[0])[:n]
    left, right = images[left_idx], images[right_idx]

    combined = downscale_bilinear(compose_pair(left, right))
    inputs = combined.reshape(n, -1)

    blank = np.zeros_like(left)
    target_map = {}
    task_specs = []
    out_dim = DIGIT * DIGIT
    for code in tasks:
        if code == "CL":
            target_map[code] = labels[left_idx]
            task_specs.append(TaskSpec("CL", CROSS_ENTROPY, 10))
        elif code == "CR":
            target_map[code] = labels[right_idx]
            task_specs.append(TaskSpec("CR", CROSS_ENTROPY, 10))
        elif code == "RL":
            iso = downscale_bilinear(compose_pair(left, blank))
            target_map[code] = iso.reshape(n, -1)
            task_specs.append(TaskSpec("RL", MEAN_SQUARED_ERROR, out_dim))
        else:
            iso = downscale_bilinear(compose_pair(blank, right))
            target_map[code] = iso.reshape(n, -1)
            task_specs.append(TaskSpec("RR", MEAN_SQUARED_ERROR, out_dim))

    targets = tuple(target_map[c] for c in tasks)
    return _make_splits(inputs, targets, tuple(task_specs), rng, val_frac,
                        test_frac, meta={"task_codes": tuple(tasks)})
