"""Composite training objectives and their analytic gradients.

Two objectives drive the whole pipeline:

* the base objective: an epoch-scheduled blend of masked feature
  reconstruction and feature classification, trained jointly through the
  encoder, decoder and head in the base session;
* the incremental objective: a beta-weighted blend of a distance
  regularizer against the projected memory dictionary, a memory
  classification term that keeps stored class means correctly classified,
  and plain example classification.

Both are plain functions of (inputs, parameters, seed); the seed determines
masking and dropout noise, so values and gradients are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import classifier, encoder, rng
from .nn_core import NumericalError, PROB_FLOOR, as_finite_array, softmax_rows

# Sub-stream tag for per-example mask selection inside the base objective.
MASK_TAG = 0

RECON_SCOPES = ("all", "masked")
RECON_REDUCTIONS = ("mean", "sum")
DISTANCE_SPACES = ("hidden", "feature")
NOVEL_HANDLING = ("provisional", "ignore")


@dataclass
class LossConfig:
    """Knobs of both objectives.

    c is the epoch-0 reconstruction weight (the weight decays as
    c * exp(-epoch/2)); beta balances the distance regularizer against the
    memory and classification terms. recon_scope selects whether the
    reconstruction error is averaged over all token positions or the masked
    ones only; recon_reduction picks per-element averaging or a raw sum per
    example. distance_space compares examples and dictionary rows after the
    hidden projection or in raw feature space. novel_label_handling decides
    what the distance term does with labels that have no dictionary row:
    expect provisional rows, or silently skip those examples.
    """

    c: float = 0.3
    beta: float = 0.7
    mask_ratio: float = 0.75
    recon_scope: str = "all"
    recon_reduction: str = "mean"
    distance_space: str = "hidden"
    novel_label_handling: str = "provisional"

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("c must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.recon_scope not in RECON_SCOPES:
            raise ValueError(f"recon_scope must be one of {RECON_SCOPES}")
        if self.recon_reduction not in RECON_REDUCTIONS:
            raise ValueError(f"recon_reduction must be one of {RECON_REDUCTIONS}")
        if self.distance_space not in DISTANCE_SPACES:
            raise ValueError(f"distance_space must be one of {DISTANCE_SPACES}")
        if self.novel_label_handling not in NOVEL_HANDLING:
            raise ValueError(f"novel_label_handling must be one of {NOVEL_HANDLING}")


@dataclass(frozen=True)
class DistanceDictionary:
    """Rows the distance regularizer measures against, plus their classes.

    Rows live in hidden space (projected memory rows, optionally extended
    with provisional projections of novel support means) or, behind the
    feature-space flag, in raw feature space.
    """

    projected_rows: np.ndarray
    row_class: tuple[int, ...]
    space: str = "hidden"

    def __post_init__(self):
        object.__setattr__(self, "projected_rows",
                           np.asarray(self.projected_rows, dtype=np.float64))
        if self.projected_rows.ndim != 2 or self.projected_rows.shape[0] == 0:
            raise ValueError("dictionary needs at least one row")
        if len(self.row_class) != self.projected_rows.shape[0]:
            raise ValueError("row classes do not align with rows")
        if len(set(self.row_class)) != len(self.row_class):
            raise ValueError("duplicate class in dictionary rows")
        self.projected_rows.setflags(write=False)


def alpha_schedule(cfg: LossConfig, epoch: int) -> float:
    """Reconstruction weight c * exp(-epoch / 2), strictly decreasing."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.c * math.exp(-epoch / 2.0)


def example_mask_seed(seed: int, index: int) -> int:
    """Mask-selection sub-stream for example `index` of one step."""
    return rng.stream_id(seed, MASK_TAG, index)


def example_dropout_seed(seed: int, index: int) -> int:
    """Dropout sub-stream for example `index` in the classification term."""
    return rng.stream_id(seed, classifier.CLASSIFICATION_TAG, index)


def memory_dropout_seed(seed: int, index: int) -> int:
    """Dropout sub-stream for memory row `index` in the memory term."""
    return rng.stream_id(seed, classifier.MEMORY_TAG, index)


def build_distance_dictionary(mem, params, provisional=(), space: str = "hidden"):
    """Project memory rows (plus provisional novel-class means) into the
    distance comparison space.

    provisional: sequence of (class_column, mean_vector) pairs for classes
    introduced in the running session; their rows are recomputed from the
    live first-layer weights whenever the dictionary is rebuilt.
    """
    if space not in DISTANCE_SPACES:
        raise ValueError(f"space must be one of {DISTANCE_SPACES}")
    columns = list(range(mem.n_classes))
    if space == "hidden":
        rows = [classifier.project_batch(mem.rows, params)]
        for column, mean in provisional:
            rows.append(classifier.project(mean, params)[None, :])
            columns.append(int(column))
        stacked = np.concatenate(rows, axis=0)
    else:
        rows = [mem.rows]
        for column, mean in provisional:
            rows.append(as_finite_array(mean, "provisional mean")[None, :])
            columns.append(int(column))
        stacked = np.concatenate(rows, axis=0)
    return DistanceDictionary(stacked, tuple(columns), space)


def distance_vector(fbar, dictionary: DistanceDictionary, params) -> np.ndarray:
    """Squared Euclidean distance from the (projected) feature to every
    dictionary row."""
    if dictionary.space == "hidden":
        point = classifier.project(fbar, params)
    else:
        point = as_finite_array(fbar, "feature")
    rows = dictionary.projected_rows
    if point.shape != (rows.shape[1],):
        raise ValueError("feature width does not match dictionary rows")
    diff = rows - point
    return np.einsum("rw,rw->r", diff, diff)


def incremental_loss(features, labels, mem, dictionary, params, cfg: LossConfig, seed: int):
    """Scalar incremental objective and its unweighted per-term breakdown.

    Value: beta * mean_j CE(-d_j, row(y_j)) + (1-beta) * mean_k CE(head(M_k), k)
    + (1-beta) * mean_j CE(head(f_j), y_j).
    """
    if mem.n_classes == 0:
        raise ValueError("representation memory is empty")
    total, breakdown, _ = classifier.incremental_terms(
        features, labels, mem.rows, dictionary, params, cfg, seed,
        compute_grads=False)
    return total, breakdown


@dataclass
class BaseGrads:
    """Gradients of the base objective for every trainable parameter."""

    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    mask_token: np.ndarray
    head: classifier.ClassifierGrads

    def as_dict(self) -> dict[str, np.ndarray]:
        flat = {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w,
                "dec_b": self.dec_b, "mask_token": self.mask_token}
        flat.update({f"head_{k}": v for k, v in self.head.as_dict().items()})
        return flat

    def check_finite(self) -> "BaseGrads":
        for name, arr in self.as_dict().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient in {name}")
        return self


def base_loss(raw_tokens, labels, enc, dec, params, cfg: LossConfig,
              epoch: int, seed: int):
    """Scalar base objective alpha * reconstruction + (1-alpha) * classification
    over one batch, plus the two unweighted terms."""
    total, breakdown, _ = _base_core(raw_tokens, labels, enc, dec, params,
                                     cfg, epoch, seed, compute_grads=False)
    return total, breakdown


def base_loss_backward(raw_tokens, labels, enc, dec, params, cfg: LossConfig,
                       epoch: int, seed: int):
    """Base objective value, breakdown, and analytic gradients for encoder,
    decoder (including the mask token) and head parameters."""
    return _base_core(raw_tokens, labels, enc, dec, params, cfg, epoch, seed,
                      compute_grads=True)


def _base_core(raw_tokens, labels, enc, dec, params, cfg, epoch, seed, compute_grads):
    raw = as_finite_array(raw_tokens, "raw tokens")
    if raw.ndim != 3 or raw.shape[0] == 0:
        raise ValueError("expected a non-empty (n, tokens, raw_dim) batch")
    y = np.asarray(labels, dtype=np.int64)
    n, n_tokens, _ = raw.shape
    if y.shape != (n,):
        raise ValueError("labels must align with the batch")
    if np.any(y < 0) or np.any(y >= params.n_classes):
        raise ValueError("label out of range for the current class count")
    alpha = alpha_schedule(cfg, epoch)

    feats = encoder.encode_batch(raw, enc)                 # (n, tokens, dim)
    dim = feats.shape[2]

    # reconstruction path, one small group at a time
    recon_sum = 0.0
    d_feats = np.zeros_like(feats) if compute_grads else None
    dec_w_g = np.zeros_like(dec.w) if compute_grads else None
    dec_b_g = np.zeros_like(dec.b) if compute_grads else None
    mask_token_g = np.zeros_like(dec.mask_token) if compute_grads else None
    for j in range(n):
        group = feats[j]
        visible, plan = encoder.mask_features(group, cfg.mask_ratio,
                                              example_mask_seed(seed, j))
        recon = encoder.reconstruct(visible, plan, dec)
        masked = np.zeros(n_tokens, dtype=bool)
        masked[list(plan.masked_indices)] = True
        scope = np.ones(n_tokens, dtype=bool) if cfg.recon_scope == "all" else masked
        n_scope = int(scope.sum())
        if n_scope == 0:
            continue
        norm = float(n_scope * dim) if cfg.recon_reduction == "mean" else 1.0
        diff = (recon - group) * scope[:, None]
        recon_sum += float((diff * diff).sum()) / norm
        if compute_grads:
            delta = (2.0 / norm) * diff
            filled = np.where(masked[:, None], dec.mask_token, group)
            dec_w_g += filled.T @ delta
            dec_b_g += delta.sum(axis=0)
            dfilled = delta @ dec.w.T
            mask_token_g += dfilled[masked].sum(axis=0)
            d_feats[j][~masked] += dfilled[~masked]
            d_feats[j] -= delta                            # target-side path
    recon_term = recon_sum / n

    # classification path, vectorized over the batch
    pooled = feats.mean(axis=1)
    fbar = encoder.normalize_rows(pooled, enc.feature_norm)
    z1 = fbar @ params.w1 + params.b1
    relu = np.maximum(z1, 0.0)
    scales = np.stack([classifier.dropout_scale(params.hidden, params.dropout_rate,
                                                example_dropout_seed(seed, j))
                       for j in range(n)])
    hidden = relu * scales
    logits = hidden @ params.w2 + params.b2
    probs = softmax_rows(logits)
    picked = np.maximum(probs[np.arange(n), y], PROB_FLOOR)
    ce_term = float(-np.log(picked).mean())

    total = alpha * recon_term + (1.0 - alpha) * ce_term
    breakdown = {"reconstruction": recon_term, "classification": ce_term}
    if not compute_grads:
        return total, breakdown, None

    # classification backward
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dz1 = (dlogits @ params.w2.T) * scales * (z1 > 0)
    head = classifier.ClassifierGrads(
        w1=(1.0 - alpha) * (fbar.T @ dz1), b1=(1.0 - alpha) * dz1.sum(axis=0),
        w2=(1.0 - alpha) * (hidden.T @ dlogits), b2=(1.0 - alpha) * dlogits.sum(axis=0))
    dfbar = dz1 @ params.w1.T
    dpooled = encoder.normalize_rows_backward(dfbar, pooled, enc.feature_norm)
    d_feats_ce = np.broadcast_to(dpooled[:, None, :] / n_tokens, feats.shape)

    # combine both paths through the encoder
    d_feats_total = (alpha / n) * d_feats + (1.0 - alpha) * d_feats_ce
    dz_enc = d_feats_total * encoder.activation_grad(feats, enc.activation)
    grads = BaseGrads(
        enc_w=np.einsum("ngi,ngo->io", raw, dz_enc),
        enc_b=dz_enc.sum(axis=(0, 1)),
        dec_w=(alpha / n) * dec_w_g,
        dec_b=(alpha / n) * dec_b_g,
        mask_token=(alpha / n) * mask_token_g,
        head=head,
    ).check_finite()
    return total, breakdown, grads
