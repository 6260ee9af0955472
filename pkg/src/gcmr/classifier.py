"""Two-layer classification head: forward, hidden projection, analytic
gradients of the memory-regularized incremental objective, and
imprinting-based expansion for novel classes.

Head layout: hidden = ReLU(W1^T f + b1) with inverted dropout in train mode,
logits = W2^T hidden + b2. The hidden map doubles as the projection applied
to memory rows when building distance dictionaries, so examples and stored
class means are always compared in the same activation space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .nn_core import (NumericalError, PROB_FLOOR, as_finite_array,
                      softmax_rows)

# Sub-stream tags keeping the dropout noise of the loss terms that share one
# optimization step independent of each other.
DROPOUT_STREAM = 0x64726F70
CLASSIFICATION_TAG = 1
MEMORY_TAG = 2
INIT_STREAM = 0x696E6974


@dataclass
class ClassifierParams:
    """Parameters of the two-layer head over C classes."""

    w1: np.ndarray  # (dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, classes)
    b2: np.ndarray  # (classes,)
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[1],):
            raise ValueError("first layer shapes disagree")
        if self.w2.ndim != 2 or self.w2.shape[0] != self.w1.shape[1]:
            raise ValueError("layer widths disagree")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError("output bias shape disagrees")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.w1.copy(), self.b1.copy(),
                                self.w2.copy(), self.b2.copy(), self.dropout_rate)

    def state_bytes(self) -> bytes:
        return b"|".join([self.w1.tobytes(), self.b1.tobytes(),
                          self.w2.tobytes(), self.b2.tobytes()])


def init_classifier(dim: int, hidden: int, n_classes: int, seed: int,
                    dropout_rate: float = 0.1) -> ClassifierParams:
    """Scaled-normal weights, zero biases, deterministic in the seed."""
    gen = rng.generator(seed, INIT_STREAM)
    w1 = gen.standard_normal((dim, hidden)) / np.sqrt(dim)
    w2 = gen.standard_normal((hidden, n_classes)) / np.sqrt(hidden)
    return ClassifierParams(w1, np.zeros(hidden), w2, np.zeros(n_classes), dropout_rate)


def dropout_scale(n_units: int, rate: float, seed: int) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped units, 1/(1-rate) otherwise."""
    if rate == 0.0:
        return np.ones(n_units)
    keep = rng.generator(seed, DROPOUT_STREAM).random(n_units) >= rate
    return keep / (1.0 - rate)


def forward(fbar, params: ClassifierParams, mode: str = "eval", seed: int = 0):
    """Run one feature vector through the head.

    Train mode applies inverted dropout to the hidden layer with a mask that
    is a deterministic function of the seed; eval mode applies neither the
    mask nor its compensation scaling. Returns (hidden, logits).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    f = as_finite_array(fbar, "feature")
    if f.shape != (params.dim,):
        raise ValueError(f"feature dim {f.shape} does not match classifier dim {params.dim}")
    hidden = np.maximum(f @ params.w1 + params.b1, 0.0)
    if mode == "train":
        hidden = hidden * dropout_scale(params.hidden, params.dropout_rate, seed)
    logits = hidden @ params.w2 + params.b2
    return hidden, logits


def project(fbar, params: ClassifierParams) -> np.ndarray:
    """Hidden-space image ReLU(W1^T f + b1), dropout-free.

    Applied both to example features and to memory rows, so distances are
    measured between comparably transformed vectors.
    """
    f = as_finite_array(fbar, "feature")
    if f.shape != (params.dim,):
        raise ValueError(f"feature dim {f.shape} does not match classifier dim {params.dim}")
    return np.maximum(f @ params.w1 + params.b1, 0.0)


def project_batch(features: np.ndarray, params: ClassifierParams) -> np.ndarray:
    return np.maximum(features @ params.w1 + params.b1, 0.0)


def eval_logits_batch(features: np.ndarray, params: ClassifierParams) -> np.ndarray:
    """Eval-mode logits for a (n, dim) feature batch."""
    return project_batch(features, params) @ params.w2 + params.b2


@dataclass
class ClassifierGrads:
    """Gradients for every head parameter, same shapes as the parameters."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros(params: ClassifierParams) -> "ClassifierGrads":
        return ClassifierGrads(np.zeros_like(params.w1), np.zeros_like(params.b1),
                               np.zeros_like(params.w2), np.zeros_like(params.b2))

    def add_scaled(self, other: "ClassifierGrads", weight: float) -> None:
        self.w1 += weight * other.w1
        self.b1 += weight * other.b1
        self.w2 += weight * other.w2
        self.b2 += weight * other.b2

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def check_finite(self) -> "ClassifierGrads":
        for name, arr in self.as_dict().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient in {name}")
        return self


def _mean_ce_with_grads(inputs, targets, params, dropout_seeds, compute_grads):
    """Train-mode cross-entropy mean over rows of `inputs`, plus head grads.

    inputs: (n, dim); targets: (n,) column indices; one dropout mask per row.
    Gradients are already divided by n (they are gradients of the mean).
    """
    n = inputs.shape[0]
    z1 = inputs @ params.w1 + params.b1
    relu = np.maximum(z1, 0.0)
    scales = np.stack([dropout_scale(params.hidden, params.dropout_rate, s)
                       for s in dropout_seeds])
    hidden = relu * scales
    logits = hidden @ params.w2 + params.b2
    probs = softmax_rows(logits)
    picked = np.maximum(probs[np.arange(n), targets], PROB_FLOOR)
    value = float(-np.log(picked).mean())
    if not compute_grads:
        return value, None
    dlogits = probs
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    dz1 = (dlogits @ params.w2.T) * scales * (z1 > 0)
    return value, ClassifierGrads(w1=inputs.T @ dz1, b1=dz1.sum(axis=0),
                                  w2=hidden.T @ dlogits, b2=dlogits.sum(axis=0))


def _distance_ce_with_grads(features, rows_idx, dictionary, params, compute_grads):
    """Mean cross-entropy over negated squared distances to dictionary rows.

    features: (n, dim) already restricted to examples that have a dictionary
    row; rows_idx: their target row indices. In hidden space the gradient
    flows through the projection of the example features; dictionary rows are
    constants within a step.
    """
    n = features.shape[0]
    rows = dictionary.projected_rows
    if dictionary.space == "hidden":
        z1 = features @ params.w1 + params.b1
        points = np.maximum(z1, 0.0)
    else:
        points = features
    diff = points[:, None, :] - rows[None, :, :]      # (n, rows, width)
    d2 = np.einsum("nrw,nrw->nr", diff, diff)
    probs = softmax_rows(-d2)
    picked = np.maximum(probs[np.arange(n), rows_idx], PROB_FLOOR)
    value = float(-np.log(picked).mean())
    if not compute_grads:
        return value, None
    grads = ClassifierGrads.zeros(params)
    if dictionary.space == "hidden":
        coeff = probs
        coeff[np.arange(n), rows_idx] -= 1.0           # q - t
        dpoints = 2.0 * (coeff @ rows) / n
        dz1 = dpoints * (z1 > 0)
        grads.w1 += features.T @ dz1
        grads.b1 += dz1.sum(axis=0)
    # feature-space distances do not involve the head parameters
    return value, grads


def incremental_terms(features, labels, memory_rows, dictionary, params, cfg, seed,
                      *, memory_regularization: bool = True, compute_grads: bool = True):
    """Value, unweighted per-term breakdown, and head gradients of the
    incremental objective on one batch.

    features: (n, dim) normalized example features; labels: class columns.
    memory_rows: (m, dim) stored class means whose targets are their own row
    positions (memory order matches classifier column order). dictionary:
    rows to measure squared distances against; may be None when
    memory_regularization is off. Weighting: beta * distance +
    (1 - beta) * (memory + classification); off mode keeps the
    classification term alone.
    """
    f = as_finite_array(features, "features")
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("expected a non-empty (n, dim) feature batch")
    if f.shape[1] != params.dim:
        raise ValueError("feature dim does not match classifier dim")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (f.shape[0],):
        raise ValueError("labels must align with features")
    if np.any(y < 0) or np.any(y >= params.n_classes):
        raise ValueError("label out of range for the current class count")
    n = f.shape[0]

    cls_seeds = [rng.stream_id(seed, CLASSIFICATION_TAG, j) for j in range(n)]
    cls_value, cls_grads = _mean_ce_with_grads(f, y, params, cls_seeds, compute_grads)

    if not memory_regularization:
        breakdown = {"classification": cls_value}
        grads = None
        if compute_grads:
            grads = ClassifierGrads.zeros(params)
            grads.add_scaled(cls_grads, 1.0)
            grads.check_finite()
        return cls_value, breakdown, grads

    mem = as_finite_array(memory_rows, "memory rows")
    if mem.ndim != 2 or mem.shape[0] == 0:
        raise ValueError("memory rows must be a non-empty (m, dim) matrix")
    if mem.shape[0] > params.n_classes:
        raise ValueError("more memory rows than classifier columns")
    mem_seeds = [rng.stream_id(seed, MEMORY_TAG, k) for k in range(mem.shape[0])]
    mem_targets = np.arange(mem.shape[0])
    mem_value, mem_grads = _mean_ce_with_grads(mem, mem_targets, params,
                                               mem_seeds, compute_grads)

    row_of = {cls: i for i, cls in enumerate(dictionary.row_class)}
    keep, rows_idx = [], []
    for j, yj in enumerate(y):
        row = row_of.get(int(yj))
        if row is None:
            if cfg.novel_label_handling == "ignore":
                continue
            raise ValueError(f"no dictionary row for label {yj}")
        keep.append(j)
        rows_idx.append(row)
    if keep:
        dist_value, dist_grads = _distance_ce_with_grads(
            f[keep], np.asarray(rows_idx), dictionary, params, compute_grads)
    else:
        dist_value, dist_grads = 0.0, (ClassifierGrads.zeros(params)
                                       if compute_grads else None)

    beta = cfg.beta
    total = beta * dist_value + (1.0 - beta) * (mem_value + cls_value)
    breakdown = {"distance": dist_value, "memory": mem_value,
                 "classification": cls_value}
    grads = None
    if compute_grads:
        grads = ClassifierGrads.zeros(params)
        grads.add_scaled(dist_grads, beta)
        grads.add_scaled(mem_grads, 1.0 - beta)
        grads.add_scaled(cls_grads, 1.0 - beta)
        grads.check_finite()
    return total, breakdown, grads


def backward(features, labels, memory_rows, dictionary, params, cfg, seed,
             *, memory_regularization: bool = True) -> ClassifierGrads:
    """Analytic gradients of the full incremental objective for every head
    parameter, including the flow through the projection inside the distance
    and memory terms."""
    _, _, grads = incremental_terms(features, labels, memory_rows, dictionary,
                                    params, cfg, seed,
                                    memory_regularization=memory_regularization,
                                    compute_grads=True)
    return grads


def expand_with_imprinting(params: ClassifierParams, novel_class_means) -> ClassifierParams:
    """Append one output column per novel class, imprinted from its support mean.

    Each new column is the hidden-space projection of the class mean scaled
    to unit norm (a zero projection stays zero); its bias starts at 0. All
    pre-existing parameters are copied verbatim, never modified.
    """
    means = list(novel_class_means)
    if not means:
        return params.copy()
    columns = []
    for mean in means:
        h = project(mean, params)
        norm = np.linalg.norm(h)
        columns.append(h / norm if norm > 0.0 else h)
    w2 = np.concatenate([params.w2, np.stack(columns, axis=1)], axis=1)
    b2 = np.concatenate([params.b2, np.zeros(len(columns))])
    return ClassifierParams(params.w1.copy(), params.b1.copy(), w2, b2,
                            params.dropout_rate)
