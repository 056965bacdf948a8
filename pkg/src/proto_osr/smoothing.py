"""Label smoothing: none, conventional, and an online variant.

The online variant keeps one cumulative prediction record q per training
sample, initialized as the sample's one-hot label and grown at every epoch
end by the model's own softmax output for that sample. A sample's soft label
is a fixed base (0.6 at its true class, alpha/(C-1) elsewhere) plus its own
normalized record scaled by the remaining mass, so every label sums to
exactly 1:

    base_sum = 0.6 + alpha,   spread = (1 - alpha) - 0.6 = 0.4 - alpha.

Easy samples accumulate near-one-hot records and keep labels close to the
conventional form; persistently confused samples spread their label mass
toward the classes they are actually mistaken for. The base floor at the
true class is what keeps smoothed training compatible with distance-margin
rejection later: the true class always dominates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

P_TRUE_FLOOR = 0.6  # guaranteed mass at the true class in online mode

MODES = ("none", "conventional", "online")


class SmoothingError(ValueError):
    """Smoothing configuration or update violates its contract."""


@dataclass
class SmoothingState:
    """Mode, strength, and (for online mode) the per-sample record table.

    ``q[i]`` is training sample ``i``'s cumulative prediction record; sample
    ids are row indices. Modes ``none`` and ``conventional`` carry no table.
    """
    mode: str
    alpha: float
    n_classes: int
    q: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise SmoothingError(f"unknown smoothing mode {self.mode!r}")
        if self.n_classes < 2:
            raise SmoothingError(f"need at least 2 classes, got {self.n_classes}")
        if self.mode == "none":
            if self.alpha != 0.0:
                raise SmoothingError("mode 'none' requires alpha == 0")
        elif self.mode == "conventional":
            if not 0.0 < self.alpha < 1.0:
                raise SmoothingError(f"conventional alpha must be in (0, 1), got {self.alpha}")
        else:  # online: spread = 0.4 - alpha must stay positive
            if not 0.0 < self.alpha < 0.4:
                raise SmoothingError(f"online alpha must be in (0, 0.4), got {self.alpha}")
        if self.mode == "online":
            if self.q is None:
                raise SmoothingError(
                    "online mode needs a per-sample record table; build the "
                    "state with init_state(labels, ...)")
            self.q = np.asarray(self.q, dtype=np.float64)
            if self.q.ndim != 2 or self.q.shape[1] != self.n_classes:
                raise SmoothingError(
                    f"record table shape {self.q.shape} != (n_samples, {self.n_classes})")
            if np.any(self.q < 0.0) or np.any(self.q.sum(axis=1) <= 0.0):
                raise SmoothingError("record rows must be non-negative with positive sums")
        elif self.q is not None:
            raise SmoothingError(f"mode {self.mode!r} carries no record")

    @property
    def n_samples(self) -> int | None:
        return None if self.q is None else self.q.shape[0]


def init_state(labels, mode: str, alpha: float, n_classes: int) -> SmoothingState:
    """State for a training set; online records start as one-hot labels."""
    if mode != "online":
        return SmoothingState(mode, alpha, n_classes)
    y = np.asarray(labels)
    if y.ndim != 1 or y.size == 0:
        raise SmoothingError(f"labels must be a nonempty 1-D array, got shape {y.shape}")
    if y.min() < 0 or y.max() >= n_classes:
        raise SmoothingError("label id outside [0, n_classes)")
    q = np.zeros((y.shape[0], n_classes))
    q[np.arange(y.shape[0]), y] = 1.0
    return SmoothingState(mode, alpha, n_classes, q)


def soft_labels(state: SmoothingState, ids, labels) -> np.ndarray:
    """Target rows [N, C] for sample ids [N] with integer class ids [N].

    ``ids`` index the state's record table and matter only in online mode;
    pass None for the other modes.
    """
    y = np.asarray(labels)
    c = state.n_classes
    if y.ndim != 1:
        raise SmoothingError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise SmoothingError("label id outside [0, n_classes)")
    onehot = np.zeros((y.shape[0], c))
    onehot[np.arange(y.shape[0]), y] = 1.0
    if state.mode == "none":
        return onehot
    a = state.alpha
    if state.mode == "conventional":
        return onehot * (1.0 - a) + (1.0 - onehot) * (a / (c - 1))
    if ids is None:
        raise SmoothingError("online mode needs the batch's sample ids")
    ids = np.asarray(ids)
    if ids.shape != y.shape:
        raise SmoothingError(f"ids shape {ids.shape} != labels shape {y.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= state.q.shape[0]):
        raise SmoothingError("sample id outside the record table")
    base = onehot * P_TRUE_FLOOR + (1.0 - onehot) * (a / (c - 1))
    spread = (1.0 - a) - P_TRUE_FLOOR
    rows = state.q[ids]
    return base + spread * (rows / rows.sum(axis=1, keepdims=True))


def epoch_update(state: SmoothingState, probs: np.ndarray) -> None:
    """Fold one epoch of training-set softmax outputs into the records.

    ``probs[i]`` must be sample ``i``'s probability row — a full pass, one
    valid distribution (sum 1 within 1e-6) per training sample.
    """
    if state.mode != "online":
        raise SmoothingError(f"epoch_update only applies to online mode, not {state.mode!r}")
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != state.q.shape:
        raise SmoothingError(f"probs shape {p.shape} != record table shape {state.q.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise SmoothingError("each probability row must be non-negative and sum to 1 within 1e-6")
    state.q += p
