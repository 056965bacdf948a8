"""Training loop: config validation, Adam algebra, epoch accounting,
bitwise-reproducible runs, resume semantics, and the trial runner."""

import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest

from proto_osr import trainer
from proto_osr.augment import AugmentSpec
from proto_osr.losses import LossConfig
from proto_osr.model import ConvSpec, ModelConfig, PrototypeModel
from proto_osr.rfdata import DeviceProfile, Fleet, build_dataset
from proto_osr.smoothing import SmoothingState
from proto_osr.trainer import (AdamState, CheckpointWriteError, TrainConfig,
                               TrainerError, adam_step, fit, known_accuracy,
                               report_rows_csv, report_summary, run_trials,
                               train_epoch)

TINY = ModelConfig(stem=ConvSpec(4, 5, 2), blocks=1, block_kernel=3, embed_dim=6)


def toy_dataset(n_train_per_class=16, n_val_per_class=8, length=64, seed=0):
    """Two classes separable by which channel carries the power."""
    rng = np.random.default_rng(seed)

    def batch(n, label):
        strong = rng.normal(size=(n, length))
        weak = 0.15 * rng.normal(size=(n, length))
        pair = (strong, weak) if label == 0 else (weak, strong)
        return np.stack(pair, axis=1), np.full(n, label, dtype=int)

    x0, y0 = batch(n_train_per_class, 0)
    x1, y1 = batch(n_train_per_class, 1)
    v0, w0 = batch(n_val_per_class, 0)
    v1, w1 = batch(n_val_per_class, 1)
    return SimpleNamespace(n_classes=2,
                           train_x=np.concatenate([x0, x1]),
                           train_y=np.concatenate([y0, y1]),
                           val_x=np.concatenate([v0, v1]),
                           val_y=np.concatenate([w0, w1]))


def toy_config(**kw):
    base = dict(epochs=4, batch_size=8, lr=1e-2, model=TINY, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# the toy classes live in specific channels, so rotate only by pi (a global
# sign flip): quarter turns would swap I with Q and alias the two classes
IPL_KW = dict(loss=LossConfig(lambda_cons=0.5),
              augment=AugmentSpec(phases=(0.0, math.pi),
                                  segments_min=2, segments_max=4),
              smoothing_mode="online", alpha=0.2)


# -- configuration ----------------------------------------------------------


def test_defaults_and_paper_shaped_config_are_accepted():
    TrainConfig()
    cfg = TrainConfig(epochs=230, batch_size=128, lr=1e-3)
    echo = cfg.to_dict()
    assert echo["epochs"] == 230
    assert echo["batch_size"] == 128
    assert echo["lr"] == 1e-3


@pytest.mark.parametrize("kw", [
    dict(epochs=0),
    dict(batch_size=1),
    dict(lr=0.0),
    dict(lr=-1e-3),
    dict(lr=float("nan")),
    dict(beta1=1.0),
    dict(beta2=0.0),
    dict(eps=0.0),
    dict(trials=0),
    dict(kappa=0.5),
])
def test_invalid_scalar_fields_are_rejected(kw):
    with pytest.raises(TrainerError):
        TrainConfig(**kw)


def test_consistency_weight_requires_an_augment_spec():
    with pytest.raises(TrainerError, match="augmentation"):
        TrainConfig(loss=LossConfig(lambda_cons=0.5))
    TrainConfig(loss=LossConfig(lambda_cons=0.5), augment=AugmentSpec())


def test_smoothing_pairing_is_validated_at_config_time():
    with pytest.raises(ValueError):
        TrainConfig(smoothing_mode="none", alpha=0.2)
    with pytest.raises(ValueError):
        TrainConfig(smoothing_mode="online", alpha=0.0)
    with pytest.raises(ValueError):
        TrainConfig(smoothing_mode="sideways", alpha=0.1)


def test_config_dict_roundtrip():
    cfg = TrainConfig(epochs=7, batch_size=16, lr=3e-4, beta1=0.85, beta2=0.98,
                      eps=1e-9, loss=LossConfig(gamma=2.0, lambda_proto=0.3,
                                                lambda_cons=0.5),
                      smoothing_mode="online", alpha=0.15,
                      augment=AugmentSpec(rotate=True, permute=False,
                                          phases=(0.0, math.pi),
                                          segments_min=2, segments_max=3),
                      model=TINY, seed=9, trials=3, kappa=2.0, pooled=True,
                      fresh_record_pass=True)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    plain = TrainConfig()
    assert TrainConfig.from_dict(plain.to_dict()) == plain


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    before = params["w"].copy()
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
    assert np.array_equal(params["w"], before)
    assert state.t == 1


def test_adam_first_step_magnitude_is_the_learning_rate():
    for g in (0.5, -3.0, 1e-6):
        params = {"w": np.array([2.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.array([g])}, state, lr=1e-3)
        step = 2.0 - params["w"][0]
        assert math.copysign(1.0, step) == math.copysign(1.0, g)
        # bias correction makes the first step lr * g / (|g| + eps) exactly
        assert abs(step) == pytest.approx(1e-3 * abs(g) / (abs(g) + 1e-8),
                                          rel=1e-12)
        if abs(g) > 1e-4:
            assert abs(step) == pytest.approx(1e-3, rel=1e-4)


def test_adam_identical_gradients_produce_identical_updates():
    params = {"a": np.full(4, 0.7), "b": np.full(4, 0.7)}
    state = AdamState.for_params(params)
    g = np.array([0.3, -0.1, 0.0, 2.0])
    for _ in range(5):
        adam_step(params, {"a": g, "b": g}, state, lr=1e-2)
    assert np.array_equal(params["a"], params["b"])


def test_adam_trajectory_is_deterministic():
    def run():
        params = {"w": np.linspace(-1, 1, 6)}
        state = AdamState.for_params(params)
        for t in range(8):
            g = np.sin(np.arange(6) + t)
            adam_step(params, {"w": g}, state, lr=5e-3)
        return params["w"]

    assert np.array_equal(run(), run())


def test_adam_rejects_mismatched_keys_and_shapes():
    params = {"w": np.zeros(3)}
    state = AdamState.for_params(params)
    with pytest.raises(TrainerError, match="keys"):
        adam_step(params, {"x": np.zeros(3)}, state, lr=0.1)
    with pytest.raises(TrainerError, match="shape"):
        adam_step(params, {"w": np.zeros(4)}, state, lr=0.1)


# -- train_epoch ------------------------------------------------------------


def frozen_epoch_setup(seed=0):
    ds = toy_dataset(seed=seed)
    model = PrototypeModel(TINY, 2, seed=seed)
    opt = AdamState.for_params(model.params)
    order = np.arange(ds.train_x.shape[0])
    batches = list(trainer._batches(ds.train_x, ds.train_y, order, 8))
    return ds, model, opt, batches


def test_epoch_matches_a_plain_numpy_reference():
    """With every improvement off, per-batch losses must equal an
    independently coded distance-softmax reference to 1e-12."""
    ds, model, opt, batches = frozen_epoch_setup()
    cfg = LossConfig()  # gamma 1, lambda_proto 0.1, no consistency
    # effectively freeze the parameters so every batch sees the same model
    stats, probs = train_epoch(model, iter(batches), SmoothingState("none", 0.0, 2),
                               cfg, None, opt, lr=1e-300, n_train=ds.train_x.shape[0])
    protos = model.params["prototypes"]
    for (idx, x, y), parts in zip(batches, stats.batches):
        z = model.embed_array(x)
        d = np.sum((z[:, None, :] - protos[None, :, :]) ** 2, axis=2)
        logits = -d - np.max(-d, axis=1, keepdims=True)
        p = np.exp(logits) / np.sum(np.exp(logits), axis=1, keepdims=True)
        dce = float(np.mean(-np.log(p[np.arange(y.size), y])))
        proto = float(np.mean(np.sum((z - protos[y]) ** 2, axis=1)))
        assert parts["dce"] == pytest.approx(dce, abs=1e-12)
        assert parts["proto"] == pytest.approx(proto, abs=1e-12)
        assert parts["consistency"] == 0.0
        assert parts["total"] == pytest.approx(dce + 0.1 * proto, abs=1e-12)
        assert np.allclose(probs[idx], p, atol=1e-12)


def test_epoch_stats_are_the_mean_of_batch_components():
    ds, model, opt, batches = frozen_epoch_setup(seed=1)
    stats, _ = train_epoch(model, iter(batches), SmoothingState("none", 0.0, 2),
                           LossConfig(), None, opt, lr=1e-2,
                           n_train=ds.train_x.shape[0])
    assert stats.n_batches == len(batches)
    for key in ("dce", "proto", "consistency", "total"):
        mean = np.mean([b[key] for b in stats.batches])
        assert getattr(stats, key) == pytest.approx(mean, abs=1e-9)


def test_epoch_probabilities_cover_every_sample():
    ds, model, opt, batches = frozen_epoch_setup(seed=2)
    _, probs = train_epoch(model, iter(batches), SmoothingState("none", 0.0, 2),
                           LossConfig(), None, opt, lr=1e-2,
                           n_train=ds.train_x.shape[0])
    assert probs.shape == (ds.train_x.shape[0], 2)
    assert np.all(np.isfinite(probs))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_epoch_aborts_on_non_finite_loss_with_batch_context(monkeypatch):
    # the autodiff layer already refuses non-finite tensors, so exercise the
    # trainer's own guard by injecting a loss that claims to have overflowed
    ds, model, opt, batches = frozen_epoch_setup(seed=3)

    def overflowing_loss(*args, **kwargs):
        return object(), {"dce": float("inf"), "proto": 1.0,
                          "consistency": 0.0, "total": float("inf")}

    monkeypatch.setattr(trainer, "total_loss", overflowing_loss)
    with pytest.raises(TrainerError, match=r"non-finite loss at batch 0.*dce="):
        train_epoch(model, iter(batches), SmoothingState("none", 0.0, 2),
                    LossConfig(), None, opt, lr=1e-2,
                    n_train=ds.train_x.shape[0])


def test_epoch_rejects_empty_iterator_and_bad_n_train():
    ds, model, opt, _ = frozen_epoch_setup(seed=4)
    with pytest.raises(TrainerError, match="empty"):
        train_epoch(model, iter(()), SmoothingState("none", 0.0, 2),
                    LossConfig(), None, opt, lr=1e-2, n_train=4)
    with pytest.raises(TrainerError, match="n_train"):
        train_epoch(model, iter(()), SmoothingState("none", 0.0, 2),
                    LossConfig(), None, opt, lr=1e-2, n_train=None)


def test_shuffle_orders_are_permutations_and_epoch_dependent():
    a = trainer._shuffle_order(7, 0, 40)
    b = trainer._shuffle_order(7, 1, 40)
    assert sorted(a.tolist()) == list(range(40))
    assert sorted(b.tolist()) == list(range(40))
    assert not np.array_equal(a, b)
    assert np.array_equal(a, trainer._shuffle_order(7, 0, 40))


def test_batches_cover_every_index_once_with_partial_tail():
    x = np.zeros((10, 2, 4))
    y = np.arange(10)
    order = trainer._shuffle_order(0, 0, 10)
    got = list(trainer._batches(x, y, order, 4))
    assert [idx.size for idx, _, _ in got] == [4, 4, 2]
    seen = np.concatenate([idx for idx, _, _ in got])
    assert sorted(seen.tolist()) == list(range(10))


# -- fit --------------------------------------------------------------------


def test_loss_decreases_on_a_separable_toy():
    ds = toy_dataset()
    wins = 0
    for seed in range(10):
        report = fit(toy_config(epochs=5, seed=seed), ds)
        if report.rows[-1].total < report.rows[0].total:
            wins += 1
    assert wins >= 9


def test_fit_report_shape_and_final_accuracy():
    ds = toy_dataset()
    report = fit(toy_config(), ds)
    assert len(report.rows) == 4
    assert [r.epoch for r in report.rows] == [0, 1, 2, 3]
    assert report.final_val_accuracy == report.rows[-1].val_accuracy
    assert report.final_val_accuracy >= 0.9    # amplitude toy is easy
    assert report.thresholds.tau.shape == (2,)
    assert report.checkpoint_path is None


def test_fit_is_bitwise_reproducible(tmp_path):
    ds = toy_dataset()
    cfg = toy_config(**IPL_KW)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    fit(cfg, ds, checkpoint_path=p1)
    fit(cfg, ds, checkpoint_path=p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_reproduces_an_uninterrupted_run(tmp_path):
    ds = toy_dataset()
    cfg4 = toy_config(**IPL_KW)
    full, half, joined = (tmp_path / n for n in ("full.json", "half.json",
                                                 "joined.json"))
    fit(cfg4, ds, checkpoint_path=full)
    fit(dataclasses.replace(cfg4, epochs=2), ds, checkpoint_path=half)
    report = fit(cfg4, ds, checkpoint_path=joined, resume_from=half)
    assert full.read_bytes() == joined.read_bytes()
    assert [r.epoch for r in report.rows] == [2, 3]  # only the new epochs


def test_resume_rejects_changed_config(tmp_path):
    ds = toy_dataset()
    cfg = toy_config()
    half = tmp_path / "half.json"
    fit(dataclasses.replace(cfg, epochs=2), ds, checkpoint_path=half)
    with pytest.raises(TrainerError, match="only epochs and trials"):
        fit(dataclasses.replace(cfg, lr=5e-3), ds, resume_from=half)
    # changing epochs alone is the supported use
    fit(dataclasses.replace(cfg, epochs=3), ds, resume_from=half)


def test_resume_rejects_checkpoint_ahead_of_config(tmp_path):
    ds = toy_dataset()
    cfg = toy_config()
    done = tmp_path / "done.json"
    fit(cfg, ds, checkpoint_path=done)
    with pytest.raises(TrainerError, match="already holds"):
        fit(dataclasses.replace(cfg, epochs=2), ds, resume_from=done)


def test_checkpoint_write_failure_keeps_the_report(tmp_path):
    ds = toy_dataset()
    target = tmp_path / "missing-dir" / "run.json"
    with pytest.raises(CheckpointWriteError) as err:
        fit(toy_config(), ds, checkpoint_path=target)
    assert len(err.value.report.rows) == 4


def test_fit_validates_dataset_classes():
    ds = toy_dataset()
    ds.val_y = np.zeros_like(ds.val_y)  # class 1 vanishes from val
    with pytest.raises(TrainerError, match="missing classes"):
        fit(toy_config(), ds)


def test_fresh_record_pass_changes_the_smoothing_inputs():
    ds = toy_dataset()
    cached = fit(toy_config(smoothing_mode="online", alpha=0.2), ds)
    fresh = fit(toy_config(smoothing_mode="online", alpha=0.2,
                           fresh_record_pass=True), ds)
    # same data and seed, different record contents -> different trajectories
    assert cached.rows[-1].total != fresh.rows[-1].total


def test_null_fleet_yields_chance_accuracy():
    """Devices with identical impairments carry no class signal, so the
    classifier must hover at chance instead of inventing one."""
    shared = dict(gain_db=1.5, phase_skew=0.2, cfo=0.0,
                  dc_offset=0.05 + 0.02j, pa_coeff=0.2, transient_len=16)
    fleet = Fleet(known=(DeviceProfile("dev00", **shared),
                         DeviceProfile("dev01", **shared)),
                  unknown=(DeviceProfile("dev02", **shared),))
    ds = build_dataset(fleet, 10, 4, 512, 20.0, seed=5)
    model = PrototypeModel(TINY, 2, seed=0)
    opt = AdamState.for_params(model.params)
    smoothing = SmoothingState("none", 0.0, 2)
    n = ds.train_x.shape[0]
    for epoch in range(3):
        order = trainer._shuffle_order(0, epoch, n)
        train_epoch(model, trainer._batches(ds.train_x, ds.train_y, order, 8),
                    smoothing, LossConfig(), None, opt, lr=1e-2,
                    master_seed=0, epoch=epoch, n_train=n)
    acc = known_accuracy(model, ds.val_x, ds.val_y)
    assert 0.2 <= acc <= 0.8


# -- reports and trials -----------------------------------------------------


def test_report_csv_round_trips_every_float():
    ds = toy_dataset()
    report = fit(toy_config(), ds)
    text = report_rows_csv(report)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(trainer.REPORT_COLUMNS)
    assert len(lines) == 1 + len(report.rows)
    for line, row in zip(lines[1:], report.rows):
        cells = line.split(",")
        assert int(cells[0]) == row.epoch
        for cell, key in zip(cells[1:], trainer.REPORT_COLUMNS[1:]):
            assert float(cell) == getattr(row, key)


def test_report_summary_has_no_wall_time():
    ds = toy_dataset()
    report = fit(toy_config(), ds)
    summary = report_summary(report)
    assert "wall_time_s" not in summary
    assert summary["epochs_completed"] == 4
    assert summary["config"]["epochs"] == 4
    assert summary["thresholds"]["tau"] == report.thresholds.tau.tolist()
    assert set(summary["final_loss"]) == {"dce", "proto", "consistency", "total"}


def test_run_trials_reports_best_and_median(tmp_path):
    ds = toy_dataset()
    cfg = toy_config(epochs=2, trials=3, seed=10)
    trials = run_trials(cfg, ds, checkpoint_dir=tmp_path)
    assert [o.seed for o in trials.outcomes] == [10, 11, 12]
    accs = [o.val_accuracy for o in trials.outcomes]
    assert trials.best_val_accuracy == max(accs)
    assert trials.best_seed == trials.outcomes[int(np.argmax(accs))].seed
    assert trials.median_val_accuracy == float(np.median(accs))
    for seed in (10, 11, 12):
        assert (tmp_path / f"seed{seed}.ckpt.json").exists()


def test_run_trials_is_deterministic():
    ds = toy_dataset()
    # pooled calibration keeps very short runs valid for every seed
    cfg = toy_config(epochs=3, trials=2, seed=3, pooled=True)
    a = run_trials(cfg, ds)
    b = run_trials(cfg, ds)
    assert [o.val_accuracy for o in a.outcomes] == [o.val_accuracy for o in b.outcomes]
