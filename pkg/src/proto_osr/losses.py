"""Training objectives over prototype distances.

Classification is a softmax over negated, scaled squared distances; its
cross-entropy is recorded in log-sum-exp form so no probability is ever
materialized on the tape:

    -sum_k y_k log p_k  =  gamma * sum_k y_k d_k  +  LSE_k(-gamma d_k)

(valid whenever the label row sums to 1). Two pull terms complete the
objective: a prototype term drawing each embedding toward its class
prototype, and a consistency term drawing the embeddings of an original
and an augmented view of the same record together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class LossError(ValueError):
    """Loss inputs violate their contract."""


@dataclass(frozen=True)
class LossConfig:
    """Objective weights: total = dce + lambda_proto * pl + lambda_cons * cl."""
    gamma: float = 1.0
    lambda_proto: float = 0.1
    lambda_cons: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise LossError(f"gamma must be > 0, got {self.gamma}")
        if self.lambda_proto < 0.0 or self.lambda_cons < 0.0:
            raise LossError("loss weights must be >= 0")


def distance_softmax(dists: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Class probabilities from squared distances: rows of exp(-gamma d) normalized.

    Max-shifted; rows sum to 1 exactly up to rounding.
    """
    d = np.asarray(dists, dtype=np.float64)
    if gamma <= 0.0:
        raise LossError(f"gamma must be > 0, got {gamma}")
    logits = -gamma * d
    logits -= logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits)
    return ex / ex.sum(axis=-1, keepdims=True)


def _check_targets(dists_shape: tuple, targets: np.ndarray) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != dists_shape:
        raise LossError(f"targets shape {t.shape} != distances shape {dists_shape}")
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise LossError("each target row must sum to 1 within 1e-6")
    if np.any(t < 0.0):
        raise LossError("target weights must be non-negative")
    return t


def dce_loss(tape: ad.Tape, dists: ad.Tensor, targets: np.ndarray,
             gamma: float = 1.0) -> ad.Tensor:
    """Mean distance-based cross-entropy over a batch.

    ``dists`` is a [B, C] tensor of squared distances; ``targets`` is a
    constant [B, C] array of label rows, each summing to 1 (one-hot or
    smoothed). Returns a scalar tensor.
    """
    if gamma <= 0.0:
        raise LossError(f"gamma must be > 0, got {gamma}")
    if dists.value.ndim != 2:
        raise LossError(f"distances must be [B, C], got {dists.value.shape}")
    t = _check_targets(dists.value.shape, targets)
    c = dists.value.shape[1]
    # gamma * <y, d> per row via an elementwise weight and a ones contraction
    weighted = ad.scale(dists, gamma * t)
    pull = ad.matmul(weighted, tape.constant(np.ones(c)))    # [B]
    spread = ad.log_sum_exp(ad.scale(dists, -gamma))         # [B]
    return ad.global_avg_pool(ad.add(pull, spread))


def prototype_loss(tape: ad.Tape, z: ad.Tensor, protos: ad.Tensor,
                   labels: np.ndarray) -> ad.Tensor:
    """Mean squared distance from each embedding to its own class prototype.

    ``labels`` are integer class ids [B]; the gather is expressed as a
    one-hot matmul so prototypes receive gradient.
    """
    y = np.asarray(labels)
    if z.value.ndim != 2 or protos.value.ndim != 2:
        raise LossError("prototype_loss needs z [B, D] and prototypes [C, D]")
    n_classes = protos.value.shape[0]
    if y.ndim != 1 or y.shape[0] != z.value.shape[0]:
        raise LossError(f"labels shape {y.shape} != batch {z.value.shape[0]}")
    if y.min() < 0 or y.max() >= n_classes:
        raise LossError("label id outside [0, n_classes)")
    onehot = np.zeros((y.shape[0], n_classes))
    onehot[np.arange(y.shape[0]), y] = 1.0
    own = ad.matmul(tape.constant(onehot), protos)           # [B, D]
    return ad.global_avg_pool(ad.sq_euclidean(z, own))


def consistency_loss(tape: ad.Tape, z_a: ad.Tensor, z_b: ad.Tensor) -> ad.Tensor:
    """Mean squared distance between paired embeddings of two views."""
    if z_a.value.shape != z_b.value.shape or z_a.value.ndim != 2:
        raise LossError(
            f"consistency_loss needs matching [B, D], got {z_a.value.shape}, {z_b.value.shape}")
    return ad.global_avg_pool(ad.sq_euclidean(z_a, z_b))


def total_loss(tape: ad.Tape, dists: ad.Tensor, z: ad.Tensor,
               protos: ad.Tensor, labels: np.ndarray, targets: np.ndarray,
               cfg: LossConfig, z_aug: ad.Tensor | None = None):
    """Record the full objective; returns (scalar tensor, float parts dict).

    ``z_aug`` may be omitted when the consistency weight is zero.
    """
    parts = {}
    loss = dce_loss(tape, dists, targets, cfg.gamma)
    parts["dce"] = float(loss.value)
    pl = prototype_loss(tape, z, protos, labels)
    parts["proto"] = float(pl.value)
    loss = ad.add(loss, ad.scale(pl, cfg.lambda_proto))
    if cfg.lambda_cons > 0.0:
        if z_aug is None:
            raise LossError("lambda_cons > 0 requires an augmented-view embedding")
        cl = consistency_loss(tape, z, z_aug)
        parts["consistency"] = float(cl.value)
        loss = ad.add(loss, ad.scale(cl, cfg.lambda_cons))
    else:
        parts["consistency"] = 0.0
    parts["total"] = float(loss.value)
    return loss, parts
