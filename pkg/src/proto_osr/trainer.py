"""End-to-end optimization: Adam over backbone weights and prototypes,
epoch-end smoothing-record updates, validation-calibrated rejection
thresholds, and a multi-seed trial runner.

Every random draw (shuffles, augmentation) comes from a counter-based
stream keyed by (seed, epoch, sample), so a run resumed from a checkpoint
retraces exactly the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .augment import AugmentSpec, augment_at
from .losses import LossConfig, distance_softmax, total_loss
from .model import ModelConfig, PrototypeModel
from .openset import ThresholdTable, calibrate
from .smoothing import SmoothingState, epoch_update, init_state, soft_labels

_MASK64 = (1 << 64) - 1

REPORT_COLUMNS = ("epoch", "dce", "proto", "consistency", "total", "val_accuracy")


class TrainerError(ValueError):
    """Invalid training configuration or a batch that broke the run."""


class CheckpointWriteError(OSError):
    """Checkpoint could not be written; the finished report stays attached."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run, including the model layout."""
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    smoothing_mode: str = "none"
    alpha: float = 0.0
    augment: AugmentSpec | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    trials: int = 1
    kappa: float = 1.0
    pooled: bool = False
    fresh_record_pass: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainerError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise TrainerError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr > 0.0:
            raise TrainerError(f"learning rate must be > 0, got {self.lr}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < b < 1.0:
                raise TrainerError(f"{name} must be in (0, 1), got {b}")
        if not self.eps > 0.0:
            raise TrainerError(f"eps must be > 0, got {self.eps}")
        if self.trials < 1:
            raise TrainerError(f"trials must be >= 1, got {self.trials}")
        if self.kappa < 1.0:
            raise TrainerError(f"kappa must be >= 1.0, got {self.kappa}")
        if self.loss.lambda_cons > 0.0 and self.augment is None:
            raise TrainerError("a positive consistency weight needs an augmentation spec")
        # validates the mode/alpha pairing early; class count comes from the data
        init_state(np.zeros(1, dtype=int), self.smoothing_mode, self.alpha, 2)

    def to_dict(self) -> dict:
        aug = self.augment
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "loss": {"gamma": self.loss.gamma,
                     "lambda_proto": self.loss.lambda_proto,
                     "lambda_cons": self.loss.lambda_cons},
            "smoothing": {"mode": self.smoothing_mode, "alpha": self.alpha},
            "augment": None if aug is None else {
                "rotate": aug.rotate, "permute": aug.permute,
                "phases": [float(p) for p in aug.phases],
                "segments_min": aug.segments_min,
                "segments_max": aug.segments_max},
            "model": self.model.to_dict(),
            "seed": self.seed, "trials": self.trials, "kappa": self.kappa,
            "pooled": self.pooled, "fresh_record_pass": self.fresh_record_pass,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        base = TrainConfig()
        ld = d.get("loss", {})
        sd = d.get("smoothing", {})
        aug = d.get("augment")
        spec = None
        if aug is not None:
            spec = AugmentSpec(rotate=bool(aug["rotate"]), permute=bool(aug["permute"]),
                               phases=tuple(float(p) for p in aug["phases"]),
                               segments_min=int(aug["segments_min"]),
                               segments_max=int(aug["segments_max"]))
        return TrainConfig(
            epochs=int(d.get("epochs", base.epochs)),
            batch_size=int(d.get("batch_size", base.batch_size)),
            lr=float(d.get("lr", base.lr)),
            beta1=float(d.get("beta1", base.beta1)),
            beta2=float(d.get("beta2", base.beta2)),
            eps=float(d.get("eps", base.eps)),
            loss=LossConfig(gamma=float(ld.get("gamma", 1.0)),
                            lambda_proto=float(ld.get("lambda_proto", 0.1)),
                            lambda_cons=float(ld.get("lambda_cons", 0.0))),
            smoothing_mode=sd.get("mode", "none"),
            alpha=float(sd.get("alpha", 0.0)),
            augment=spec,
            model=ModelConfig.from_dict(d["model"]) if d.get("model") else ModelConfig(),
            seed=int(d.get("seed", 0)),
            trials=int(d.get("trials", 1)),
            kappa=float(d.get("kappa", 1.0)),
            pooled=bool(d.get("pooled", False)),
            fresh_record_pass=bool(d.get("fresh_record_pass", False)),
        )


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_params(params: dict) -> "AdamState":
        return AdamState(m={k: np.zeros_like(a) for k, a in params.items()},
                         v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, mutating params and state in place."""
    if set(params) != set(grads):
        raise TrainerError(
            f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    if set(params) != set(state.m) or set(params) != set(state.v):
        raise TrainerError("optimizer state keys do not match parameters")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise TrainerError(
                f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# epoch loop


@dataclass(frozen=True)
class EpochStats:
    """Mean loss components over one epoch plus the raw per-batch values."""
    dce: float
    proto: float
    consistency: float
    total: float
    n_batches: int
    batches: tuple


def train_epoch(model: PrototypeModel, batches, smoothing: SmoothingState,
                loss_cfg: LossConfig, augment_spec: AugmentSpec | None,
                opt_state: AdamState, *, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8, master_seed: int = 0,
                epoch: int = 0, n_train: int | None = None):
    """One optimizer pass over ``batches``.

    ``batches`` yields ``(indices, x, y)`` triples covering every training
    sample exactly once. The clean branch drives the distance losses; when
    the consistency weight is positive each sample's augmented view is
    embedded on the same tape so one backward pass covers both branches.
    Clean-branch class probabilities are cached per sample (at the
    pre-update parameters) for the epoch-end smoothing update.

    Returns ``(EpochStats, probs)`` with ``probs[i]`` the probability row of
    training sample ``i``.
    """
    if n_train is None or n_train < 1:
        raise TrainerError("n_train must be the positive training-set size")
    probs = np.full((n_train, model.n_classes), np.nan)
    sums = {"dce": 0.0, "proto": 0.0, "consistency": 0.0, "total": 0.0}
    recorded = []
    n_batches = 0
    for idx, x, y in batches:
        idx = np.asarray(idx)
        targets = soft_labels(smoothing, idx, y)
        tape = ad.Tape()
        leaves = model.leaves(tape)
        z = model.embed(tape, x, leaves)
        dists = ad.sq_euclidean(z, leaves["prototypes"], pairwise=True)
        z_aug = None
        if loss_cfg.lambda_cons > 0.0:
            if augment_spec is None:
                raise TrainerError("a positive consistency weight needs an augmentation spec")
            x_aug = np.stack([augment_at(x[i], augment_spec, master_seed, epoch,
                                         int(idx[i]))
                              for i in range(idx.size)])
            z_aug = model.embed(tape, x_aug, leaves)
        loss, parts = total_loss(tape, dists, z, leaves["prototypes"], y, targets,
                                 loss_cfg, z_aug)
        if not all(math.isfinite(v) for v in parts.values()):
            detail = ", ".join(f"{k}={parts[k]!r}"
                               for k in ("dce", "proto", "consistency", "total"))
            raise TrainerError(f"non-finite loss at batch {n_batches}: {detail}")
        probs[idx] = distance_softmax(dists.value, loss_cfg.gamma)
        grads_by_leaf = tape.backward(loss)
        grads = {name: grads_by_leaf[leaf] for name, leaf in leaves.items()}
        adam_step(model.params, grads, opt_state, lr, beta1, beta2, eps)
        for k in sums:
            sums[k] += parts[k]
        recorded.append(dict(parts))
        n_batches += 1
    if n_batches == 0:
        raise TrainerError("training split is empty")
    stats = EpochStats(dce=sums["dce"] / n_batches, proto=sums["proto"] / n_batches,
                       consistency=sums["consistency"] / n_batches,
                       total=sums["total"] / n_batches, n_batches=n_batches,
                       batches=tuple(recorded))
    return stats, probs


# --------------------------------------------------------------------------
# full runs


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    dce: float
    proto: float
    consistency: float
    total: float
    val_accuracy: float


@dataclass(frozen=True)
class TrainReport:
    """One row per epoch completed in this process, plus run-level results."""
    rows: tuple
    wall_time_s: float
    checkpoint_path: str | None
    config: dict
    thresholds: ThresholdTable
    final_val_accuracy: float


def _shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # the low word 0xFFFFFFFF can never collide with an augmentation stream,
    # whose low word is a real sample index
    key = [seed & _MASK64, ((epoch & 0xFFFFFFFF) << 32) | 0xFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def _batches(x: np.ndarray, y: np.ndarray, order: np.ndarray, batch_size: int):
    for s in range(0, order.size, batch_size):
        idx = order[s:s + batch_size]
        yield idx, x[idx], y[idx]


def known_accuracy(model: PrototypeModel, x: np.ndarray, y: np.ndarray) -> float:
    """Closed-set accuracy: fraction assigned to their true class's prototype."""
    z = model.embed_array(x)
    return float(np.mean(np.argmin(model.distances(z), axis=1) == y))


def _check_dataset(ds) -> None:
    if ds.n_classes < 2:
        raise TrainerError(f"need at least 2 known classes, got {ds.n_classes}")
    for split, labels in (("train", ds.train_y), ("val", ds.val_y)):
        missing = sorted(set(range(ds.n_classes)) - set(np.unique(labels).tolist()))
        if missing:
            raise TrainerError(f"{split} split is missing classes {missing}")


def fit(config: TrainConfig, dataset, checkpoint_path=None,
        resume_from=None) -> TrainReport:
    """Train for ``config.epochs`` epochs and calibrate rejection thresholds.

    With ``resume_from`` set, training continues a stored run from its
    recorded epoch count; the stored configuration must match ``config``
    in everything except ``epochs`` and ``trials``, and the combined run
    reproduces an uninterrupted one exactly.
    """
    t0 = time.perf_counter()
    _check_dataset(dataset)
    c = dataset.n_classes
    x_train, y_train = dataset.train_x, dataset.train_y
    n = x_train.shape[0]
    echo = config.to_dict()
    if resume_from is not None:
        state = ckpt.load(resume_from)
        stored, want = dict(state["train"]), dict(echo)
        for key in ("epochs", "trials"):
            stored.pop(key, None)
            want.pop(key, None)
        if stored != want:
            raise TrainerError(
                "resume config differs from the stored run (only epochs and "
                "trials may change)")
        model = ckpt.restore_model(state)
        if model.n_classes != c:
            raise TrainerError(
                f"checkpoint has {model.n_classes} classes, dataset has {c}")
        smoothing = ckpt.restore_smoothing(state)
        if smoothing.mode == "online" and smoothing.n_samples != n:
            raise TrainerError(
                f"checkpoint smoothing records cover {smoothing.n_samples} "
                f"training samples, dataset has {n}")
        opt_d = ckpt.restore_optimizer(state, model.params)
        opt = AdamState(m=opt_d["m"], v=opt_d["v"], t=opt_d["t"])
        start = int(state["epochs_completed"])
        if start > config.epochs:
            raise TrainerError(
                f"checkpoint already holds {start} epochs, config asks for "
                f"{config.epochs}")
    else:
        model = PrototypeModel(config.model, c, seed=config.seed)
        smoothing = init_state(y_train, config.smoothing_mode, config.alpha, c)
        opt = AdamState.for_params(model.params)
        start = 0

    rows = []
    for epoch in range(start, config.epochs):
        order = _shuffle_order(config.seed, epoch, n)
        stats, probs = train_epoch(
            model, _batches(x_train, y_train, order, config.batch_size),
            smoothing, config.loss, config.augment, opt, lr=config.lr,
            beta1=config.beta1, beta2=config.beta2, eps=config.eps,
            master_seed=config.seed, epoch=epoch, n_train=n)
        if smoothing.mode == "online":
            if config.fresh_record_pass:
                z = model.embed_array(x_train)
                probs = distance_softmax(model.distances(z), config.loss.gamma)
            epoch_update(smoothing, probs)
        acc = known_accuracy(model, dataset.val_x, dataset.val_y)
        rows.append(EpochRow(epoch=epoch, dce=stats.dce, proto=stats.proto,
                             consistency=stats.consistency, total=stats.total,
                             val_accuracy=acc))

    z_val = model.embed_array(dataset.val_x)
    table = calibrate(z_val, dataset.val_y, model.params["prototypes"],
                      kappa=config.kappa, pooled=config.pooled)
    state = ckpt.build_state(model=model, loss=echo["loss"], smoothing=smoothing,
                             optimizer={"t": opt.t, "m": opt.m, "v": opt.v},
                             epochs_completed=config.epochs, thresholds=table,
                             train=echo)
    final_acc = (rows[-1].val_accuracy if rows
                 else known_accuracy(model, dataset.val_x, dataset.val_y))
    report = TrainReport(rows=tuple(rows), wall_time_s=time.perf_counter() - t0,
                         checkpoint_path=None if checkpoint_path is None
                         else os.fspath(checkpoint_path),
                         config=echo, thresholds=table,
                         final_val_accuracy=final_acc)
    if checkpoint_path is not None:
        try:
            ckpt.save(checkpoint_path, state)
        except OSError as exc:
            raise CheckpointWriteError(
                f"could not write checkpoint {checkpoint_path}: {exc}",
                report) from exc
    return report


def report_rows_csv(report: TrainReport) -> str:
    """Per-epoch rows as CSV; floats use shortest round-trip formatting."""
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(",".join([str(r.epoch)] +
                              [repr(float(getattr(r, k)))
                               for k in REPORT_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def report_summary(report: TrainReport) -> dict:
    """Run-level summary for the JSON artifact (deterministic fields only)."""
    out = {
        "epochs_completed": len(report.rows),
        "final_val_accuracy": report.final_val_accuracy,
        "checkpoint_path": report.checkpoint_path,
        "thresholds": report.thresholds.to_dict(),
        "config": report.config,
    }
    if report.rows:
        last = report.rows[-1]
        out["final_loss"] = {"dce": last.dce, "proto": last.proto,
                             "consistency": last.consistency, "total": last.total}
    return out


# --------------------------------------------------------------------------
# trial runner


@dataclass(frozen=True)
class TrialOutcome:
    seed: int
    val_accuracy: float
    report: TrainReport


@dataclass(frozen=True)
class TrialsReport:
    outcomes: tuple
    best_seed: int
    best_val_accuracy: float
    median_val_accuracy: float


def run_trials(config: TrainConfig, dataset, checkpoint_dir=None) -> TrialsReport:
    """Train ``config.trials`` runs seeded ``seed, seed+1, ...``.

    Reports the best run by final validation accuracy (ties break to the
    lowest seed) alongside the median, so a lucky seed cannot hide typical
    behavior.
    """
    outcomes = []
    for i in range(config.trials):
        cfg = dataclasses.replace(config, seed=config.seed + i)
        path = None
        if checkpoint_dir is not None:
            path = os.path.join(os.fspath(checkpoint_dir),
                                f"seed{cfg.seed}.ckpt.json")
        rep = fit(cfg, dataset, checkpoint_path=path)
        outcomes.append(TrialOutcome(seed=cfg.seed,
                                     val_accuracy=rep.final_val_accuracy,
                                     report=rep))
    accs = np.array([o.val_accuracy for o in outcomes])
    best = int(np.argmax(accs))
    return TrialsReport(outcomes=tuple(outcomes), best_seed=outcomes[best].seed,
                        best_val_accuracy=float(accs[best]),
                        median_val_accuracy=float(np.median(accs)))
