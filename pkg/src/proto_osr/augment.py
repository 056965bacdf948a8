"""Label-preserving I/Q augmentations: phase rotation and segment shuffling.

Rotation by a quarter turn (0, pi/2, pi, 3pi/2) is special-cased to sign
swaps, so per-sample magnitudes — and therefore total power — are preserved
bit for bit, not merely to rounding. Segment permutation reorders contiguous
time slices and never touches sample values.

Randomness is counter-based: every (master seed, epoch, sample index) triple
opens its own Philox stream, so the draw for a sample does not depend on
batch order or on how many other samples were augmented first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUARTER_TURNS = (0.0, np.pi / 2.0, np.pi, 3.0 * np.pi / 2.0)


class AugmentError(ValueError):
    """Augmentation inputs violate their contract."""


@dataclass(frozen=True)
class AugmentSpec:
    """Which transforms run and their draw ranges."""
    rotate: bool = True
    permute: bool = True
    phases: tuple = QUARTER_TURNS
    segments_min: int = 4
    segments_max: int = 8

    def __post_init__(self):
        if self.rotate and len(self.phases) == 0:
            raise AugmentError("rotation enabled with an empty phase set")
        for ph in self.phases:
            if not np.isfinite(ph):
                raise AugmentError(f"non-finite phase {ph}")
        if not 1 <= self.segments_min <= self.segments_max:
            raise AugmentError(
                f"need 1 <= segments_min <= segments_max, got "
                f"[{self.segments_min}, {self.segments_max}]")


def _check_iq(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != 2 or x.shape[1] < 1:
        raise AugmentError(f"expected an I/Q record [2, L], got shape {x.shape}")
    return x


def rotate(x: np.ndarray, phase: float) -> np.ndarray:
    """Rotate the complex baseband by ``phase`` radians.

    Quarter-turn phases take the exact sign-swap path; any other phase uses
    the usual cos/sin mix (power then preserved only to rounding).
    """
    x = _check_iq(x)
    if not np.isfinite(phase):
        raise AugmentError(f"non-finite phase {phase}")
    i, q = x[0], x[1]
    if phase == QUARTER_TURNS[0]:
        return x.copy()
    if phase == QUARTER_TURNS[1]:
        return np.stack([-q, i])
    if phase == QUARTER_TURNS[2]:
        return np.stack([-i, -q])
    if phase == QUARTER_TURNS[3]:
        return np.stack([q, -i])
    c, s = np.cos(phase), np.sin(phase)
    return np.stack([i * c - q * s, i * s + q * c])


def permute(x: np.ndarray, order) -> np.ndarray:
    """Reorder ``len(order)`` near-equal contiguous segments by ``order``.

    ``order`` must be a permutation of range(n). With one segment the output
    equals the input bitwise.
    """
    x = _check_iq(x)
    order = np.asarray(order)
    n = order.shape[0]
    if n < 1 or sorted(order.tolist()) != list(range(n)):
        raise AugmentError(f"order {order.tolist()} is not a permutation of range({n})")
    segments = np.array_split(x, n, axis=1)
    return np.concatenate([segments[j] for j in order], axis=1)


def stream(master_seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Philox stream keyed by (seed, epoch, sample index); order-independent."""
    if not 0 <= epoch < 2 ** 32:
        raise AugmentError(f"epoch {epoch} outside [0, 2^32)")
    if not 0 <= sample_index < 2 ** 32:
        raise AugmentError(f"sample_index {sample_index} outside [0, 2^32)")
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF,
                    (epoch << 32) | sample_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def augment(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one random rotation then one random segment permutation.

    Draw order is fixed (phase, segment count, permutation) so a given
    stream state always yields the same transform.
    """
    x = _check_iq(x)
    if spec.rotate:
        phase = spec.phases[int(rng.integers(0, len(spec.phases)))]
        x = rotate(x, phase)
    if spec.permute:
        n = int(rng.integers(spec.segments_min, spec.segments_max + 1))
        x = permute(x, rng.permutation(n))
    return x


def augment_at(x: np.ndarray, spec: AugmentSpec, master_seed: int,
               epoch: int, sample_index: int) -> np.ndarray:
    """Deterministic augmentation for a sample's position in the schedule."""
    return augment(x, spec, stream(master_seed, epoch, sample_index))
