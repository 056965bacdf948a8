"""Unknown-emitter rejection by prototype-distance margins.

A sample's score against class i is g_i = -||z - m_i||^2. The margin between
the best and second-best class is small when a sample sits between known
clusters — the signature of an unknown emitter. Per-class thresholds are
calibrated on correctly classified validation samples as tau = mu - kappa *
sigma; at test time a sample is rejected iff its margin falls strictly below
the threshold of its best-matching class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import distance_softmax
from .model import pairwise_sq_dists

log = logging.getLogger(__name__)

UNKNOWN = -1  # sentinel predicted-class id for rejected samples


class CalibrationError(ValueError):
    """Validation data cannot support threshold calibration."""


@dataclass(frozen=True)
class ThresholdTable:
    """Per-class rejection thresholds with their calibration provenance.

    In pooled mode every class shares one (mu, sigma, tau) triple computed
    from all correct validation margins together.
    """
    kappa: float
    mu: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray
    counts: np.ndarray
    pooled: bool = False

    def __post_init__(self):
        if self.kappa < 1.0:
            raise CalibrationError(f"kappa must be >= 1.0, got {self.kappa}")
        for name in ("mu", "sigma", "tau", "counts"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        shapes = {self.mu.shape, self.sigma.shape, self.tau.shape, self.counts.shape}
        if len(shapes) != 1 or self.mu.ndim != 1:
            raise CalibrationError("mu/sigma/tau/counts must share one 1-D shape")
        if np.any(self.tau > self.mu + 1e-12):
            raise CalibrationError("tau must not exceed mu")
        if np.any(self.counts < 2):
            raise CalibrationError("every class needs >= 2 calibration samples")

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    def to_dict(self) -> dict:
        return {"kappa": float(self.kappa), "pooled": bool(self.pooled),
                "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "tau": self.tau.tolist(), "counts": self.counts.astype(int).tolist()}

    @staticmethod
    def from_dict(d: dict) -> "ThresholdTable":
        return ThresholdTable(kappa=float(d["kappa"]), mu=np.array(d["mu"], dtype=np.float64),
                              sigma=np.array(d["sigma"], dtype=np.float64),
                              tau=np.array(d["tau"], dtype=np.float64),
                              counts=np.array(d["counts"]), pooled=bool(d["pooled"]))


@dataclass(frozen=True)
class Decision:
    """One accept/reject verdict with its evidence."""
    predicted: int            # class id, or UNKNOWN when rejected
    i1: int
    i2: int
    margin: float
    threshold: float
    g: np.ndarray = field(repr=False, default=None)


def top2(dists: np.ndarray):
    """Best and second-best classes plus margins for distance rows [N, C].

    Returns (i1, i2, margin) arrays; ties break toward the lower class index.
    """
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] < 2:
        raise CalibrationError(f"need distance rows [N, C>=2], got shape {d.shape}")
    # stable sort on distances gives lowest-index winners on ties
    order = np.argsort(d, axis=1, kind="stable")
    i1, i2 = order[:, 0], order[:, 1]
    rows = np.arange(d.shape[0])
    margin = d[rows, i2] - d[rows, i1]   # = g_i1 - g_i2 >= 0
    return i1, i2, margin


def margin(z: np.ndarray, protos: np.ndarray):
    """Scores and margin for one embedding: (i1, i2, margin, g)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise CalibrationError(f"margin expects one embedding [D], got {z.shape}")
    d = pairwise_sq_dists(z[None], np.asarray(protos, dtype=np.float64))
    i1, i2, m = top2(d)
    return int(i1[0]), int(i2[0]), float(m[0]), -d[0]


def calibrate(z_val: np.ndarray, labels: np.ndarray, protos: np.ndarray,
              kappa: float = 1.0, pooled: bool = False) -> ThresholdTable:
    """Fit per-class (or pooled) margin thresholds tau = mu - kappa * sigma.

    Only validation samples whose best-matching prototype equals their true
    class contribute. Standard deviation uses the n-1 denominator, so every
    class (or the pool) needs at least two contributing samples.
    """
    if kappa < 1.0:
        raise CalibrationError(f"kappa must be >= 1.0, got {kappa}")
    z_val = np.asarray(z_val, dtype=np.float64)
    y = np.asarray(labels)
    protos = np.asarray(protos, dtype=np.float64)
    c = protos.shape[0]
    if z_val.ndim != 2 or z_val.shape[0] != y.shape[0]:
        raise CalibrationError("embeddings and labels disagree in length")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise CalibrationError("label id outside [0, n_classes)")
    i1, _, margins = top2(pairwise_sq_dists(z_val, protos))
    correct = i1 == y
    if pooled:
        pool = margins[correct]
        if pool.size < 2:
            raise CalibrationError(
                f"pooled calibration needs >= 2 correct samples, got {pool.size}")
        mu = float(pool.mean())
        sigma = float(pool.std(ddof=1))
        table = ThresholdTable(kappa=kappa, mu=np.full(c, mu), sigma=np.full(c, sigma),
                               tau=np.full(c, mu - kappa * sigma),
                               counts=np.full(c, pool.size), pooled=True)
    else:
        mu = np.zeros(c)
        sigma = np.zeros(c)
        counts = np.zeros(c, dtype=int)
        for k in range(c):
            mk = margins[correct & (y == k)]
            if mk.size < 2:
                raise CalibrationError(
                    f"class {k} has {mk.size} correctly classified validation "
                    f"samples; calibration needs >= 2")
            mu[k], sigma[k], counts[k] = mk.mean(), mk.std(ddof=1), mk.size
        table = ThresholdTable(kappa=kappa, mu=mu, sigma=sigma,
                               tau=mu - kappa * sigma, counts=counts, pooled=False)
    if np.any(table.tau < 0.0):
        neg = np.flatnonzero(table.tau < 0.0).tolist()
        log.warning("negative rejection threshold for classes %s: these never reject", neg)
    return table


def decide(z: np.ndarray, protos: np.ndarray, table: ThresholdTable) -> Decision:
    """Accept/reject one embedding: UNKNOWN iff margin < tau of the best class."""
    i1, i2, m, g = margin(z, protos)
    if table.n_classes != np.asarray(protos).shape[0]:
        raise CalibrationError("threshold table does not cover all classes")
    thr = float(table.tau[i1])
    predicted = UNKNOWN if m < thr else i1
    return Decision(predicted=predicted, i1=i1, i2=i2, margin=m, threshold=thr, g=g)


def decide_from_dists(dists: np.ndarray, table: ThresholdTable):
    """Vectorized decisions for distance rows: (predicted [N], margins [N])."""
    i1, _, margins = top2(dists)
    if table.n_classes != np.asarray(dists).shape[1]:
        raise CalibrationError("threshold table does not cover all classes")
    predicted = np.where(margins < table.tau[i1], UNKNOWN, i1)
    return predicted, margins


def decide_by_probability(z: np.ndarray, protos: np.ndarray, gamma: float,
                          tau_p: float) -> Decision:
    """Alternative rule for ablation: reject iff max softmax probability < tau_p."""
    i1, i2, m, g = margin(z, protos)
    p = distance_softmax(-g[None], gamma=gamma)[0]
    predicted = UNKNOWN if p[i1] < tau_p else i1
    return Decision(predicted=predicted, i1=i1, i2=i2, margin=m, threshold=tau_p, g=g)


def auroc(known_scores: np.ndarray, unknown_scores: np.ndarray):
    """Rank-based AUROC of score as a known-vs-unknown separator.

    Higher scores should indicate "known"; ties contribute 1/2. Returns None
    when either side is empty (undefined, never zero).
    """
    a = np.asarray(known_scores, dtype=np.float64)
    b = np.asarray(unknown_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return None
    merged = np.concatenate([a, b])
    uniq, inv, counts = np.unique(merged, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = starts + 1.0 + (counts - 1.0) / 2.0    # average rank per tie group
    ranks = avg_rank[inv]
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


@dataclass
class MetricsRecord:
    """Open-set evaluation summary; undefined partitions hold None."""
    known_accuracy: float | None
    unknown_rejection: float | None
    auroc: float | None
    n_known: int
    n_unknown: int
    kappa: float
    confusion: np.ndarray = field(repr=False, default=None)
    # confusion rows: true classes then a final true-unknown row;
    # columns: predicted classes then a final predicted-UNKNOWN column

    def flat(self) -> dict:
        return {"known_accuracy": self.known_accuracy,
                "unknown_rejection": self.unknown_rejection,
                "auroc": self.auroc, "n_known": self.n_known,
                "n_unknown": self.n_unknown, "kappa": self.kappa}

    def confusion_dict(self) -> dict:
        c = self.confusion.shape[0] - 1
        return {"classes": list(range(c)) + ["UNKNOWN"],
                "rows": "true class (last row: unknown emitters)",
                "columns": "predicted class (last column: rejected)",
                "matrix": self.confusion.astype(int).tolist()}


def evaluate(z_known: np.ndarray, labels_known: np.ndarray,
             z_unknown: np.ndarray, protos: np.ndarray,
             table: ThresholdTable) -> MetricsRecord:
    """Score a test split of known and unknown emitters against a table.

    Known accuracy counts a sample only when it is both accepted and
    correctly classified, over all known samples. Rejection is the fraction
    of unknown samples decided UNKNOWN. AUROC treats the margin as a
    known-vs-unknown score.
    """
    protos = np.asarray(protos, dtype=np.float64)
    c = protos.shape[0]
    y = np.asarray(labels_known)
    z_known = np.asarray(z_known, dtype=np.float64).reshape(-1, protos.shape[1])
    z_unknown = np.asarray(z_unknown, dtype=np.float64).reshape(-1, protos.shape[1])
    n_k, n_u = z_known.shape[0], z_unknown.shape[0]
    if n_k + n_u == 0:
        raise CalibrationError("evaluate needs a nonempty test set")

    confusion = np.zeros((c + 1, c + 1), dtype=int)
    acc = rej = score = None
    mk = mu = np.zeros(0)
    if n_k:
        preds, mk = decide_from_dists(pairwise_sq_dists(z_known, protos), table)
        acc = float(np.mean((preds == y) & (preds != UNKNOWN)))
        for t, p in zip(y, preds):
            confusion[t, c if p == UNKNOWN else p] += 1
    if n_u:
        preds_u, mu = decide_from_dists(pairwise_sq_dists(z_unknown, protos), table)
        rej = float(np.mean(preds_u == UNKNOWN))
        for p in preds_u:
            confusion[c, c if p == UNKNOWN else p] += 1
    if n_k and n_u:
        score = auroc(mk, mu)
    return MetricsRecord(known_accuracy=acc, unknown_rejection=rej, auroc=score,
                         n_known=n_k, n_unknown=n_u, kappa=table.kappa,
                         confusion=confusion)


def tune_global_margin_threshold(margins_known: np.ndarray, correct: np.ndarray,
                                 target_accuracy: float):
    """Pick one global margin cutoff whose known accuracy is nearest a target.

    Sweeps every achievable operating point (each unique margin value, plus
    accept-all). Returns (tau, accuracy_at_tau). Acceptance is margin >= tau,
    mirroring the strict-< rejection rule.
    """
    m = np.asarray(margins_known, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    if m.size == 0 or m.shape != ok.shape:
        raise CalibrationError("need matching nonempty margins and correctness flags")
    if not 0.0 < target_accuracy <= 1.0:
        raise CalibrationError(f"target accuracy must be in (0, 1], got {target_accuracy}")
    candidates = np.concatenate([[0.0], np.unique(m), [np.nextafter(m.max(), np.inf)]])
    best_tau, best_acc, best_gap = 0.0, -1.0, np.inf
    for tau in candidates:
        acc = float(np.mean(ok & (m >= tau)))
        gap = abs(acc - target_accuracy)
        # prefer the tightest threshold among equally close accuracies
        if gap < best_gap - 1e-15 or (abs(gap - best_gap) <= 1e-15 and tau > best_tau):
            best_tau, best_acc, best_gap = float(tau), acc, gap
    return best_tau, best_acc
