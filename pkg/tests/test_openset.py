"""Margin rule, threshold calibration, and open-set metrics."""

import logging

import numpy as np
import pytest

from proto_osr.openset import (UNKNOWN, CalibrationError, Decision, MetricsRecord,
                               ThresholdTable, auroc, calibrate, decide,
                               decide_by_probability, decide_from_dists, evaluate,
                               margin, top2, tune_global_margin_threshold)


def table_of(tau, kappa=1.0, pooled=False):
    tau = np.asarray(tau, dtype=np.float64)
    return ThresholdTable(kappa=kappa, mu=tau + 1.0, sigma=np.ones_like(tau),
                          tau=tau, counts=np.full(tau.shape, 2), pooled=pooled)


# ------------------------------------------------------------------- margins

def test_margin_hand_values():
    i1, i2, m = top2(np.array([[1.0, 4.0]]))
    assert (i1[0], i2[0], m[0]) == (0, 1, 3.0)
    i1, i2, m = top2(np.array([[2.0, 5.0, 9.0]]))
    assert (i1[0], i2[0], m[0]) == (0, 1, 3.0)
    i1, i2, m = top2(np.array([[7.0, 7.0, 7.0]]))
    assert m[0] == 0.0 and i1[0] == 0 and i2[0] == 1  # ties break low


def test_margin_from_embedding():
    protos = np.array([[0.0, 0.0], [3.0, 4.0]])
    i1, i2, m, g = margin(np.array([0.0, 0.0]), protos)
    assert (i1, i2) == (0, 1)
    assert m == 25.0
    np.testing.assert_array_equal(g, [0.0, -25.0])


def test_margin_invariances():
    rng = np.random.default_rng(0)
    d = rng.uniform(1.0, 9.0, size=(20, 5))
    _, _, base = top2(d)
    _, _, shifted = top2(d + 3.7)       # constant shift of all scores
    np.testing.assert_allclose(shifted, base, atol=1e-12)
    i1, i2, _ = top2(d)
    for row in range(20):
        others = [k for k in range(5) if k not in (i1[row], i2[row])]
        perm = d[row].copy()
        perm[others] = perm[list(reversed(others))]
        _, _, m2 = top2(perm[None])
        assert m2[0] == base[row]


# --------------------------------------------------------------- calibration

def cal_fixture():
    """1-D embeddings around prototypes 0 and 1 with exact integer margins."""
    protos = np.array([[0.0], [1.0]])
    # class 0 at z in {0, -0.5, -1}: margins 1 - 2z = {1, 2, 3}
    # class 1 at z in {1, 1.5}: margins 2z - 1 = {1, 2}
    z = np.array([[0.0], [-0.5], [-1.0], [1.0], [1.5]])
    y = np.array([0, 0, 0, 1, 1])
    return z, y, protos


def test_calibrate_hand_oracle():
    z, y, protos = cal_fixture()
    t = calibrate(z, y, protos, kappa=1.0)
    assert t.mu[0] == 2.0 and t.sigma[0] == 1.0 and t.tau[0] == 1.0
    assert t.counts.tolist() == [3, 2]
    assert t.mu[1] == 1.5
    assert t.tau[1] == pytest.approx(1.5 - np.std([1.0, 2.0], ddof=1), abs=1e-15)


def test_calibrate_zero_spread_gives_tau_equal_mu():
    protos = np.array([[0.0], [1.0]])
    z = np.array([[0.0], [0.0], [1.0], [1.0]])   # identical margins per class
    y = np.array([0, 0, 1, 1])
    for kappa in (1.0, 2.5, 10.0):
        t = calibrate(z, y, protos, kappa=kappa)
        np.testing.assert_array_equal(t.sigma, [0.0, 0.0])
        np.testing.assert_array_equal(t.tau, t.mu)


def test_calibrate_errors_name_the_class():
    z, y, protos = cal_fixture()
    with pytest.raises(CalibrationError, match="kappa"):
        calibrate(z, y, protos, kappa=0.5)
    # class 1 keeps only one correct sample
    z2 = z[:4]
    y2 = y[:4]
    with pytest.raises(CalibrationError, match="class 1"):
        calibrate(z2, y2, protos)
    # a misclassified sample does not count toward its class
    z3 = np.vstack([z, [[0.9]]])   # true class 0 but lands on prototype 1
    y3 = np.append(y, 0)
    t = calibrate(z3, y3, protos)
    assert t.counts[0] == 3


def test_calibrate_pooled_mode():
    z, y, protos = cal_fixture()
    t = calibrate(z, y, protos, kappa=1.0, pooled=True)
    pool = np.array([1.0, 2.0, 3.0, 1.0, 2.0])
    assert t.pooled
    np.testing.assert_allclose(t.mu, np.full(2, pool.mean()), atol=1e-15)
    np.testing.assert_allclose(t.tau, np.full(2, pool.mean() - pool.std(ddof=1)), atol=1e-15)
    assert t.counts.tolist() == [5, 5]


def test_threshold_table_invariants():
    with pytest.raises(CalibrationError):
        ThresholdTable(kappa=0.9, mu=np.ones(2), sigma=np.zeros(2),
                       tau=np.ones(2), counts=np.full(2, 2))
    with pytest.raises(CalibrationError):
        ThresholdTable(kappa=1.0, mu=np.ones(2), sigma=np.zeros(2),
                       tau=np.array([2.0, 0.5]), counts=np.full(2, 2))
    with pytest.raises(CalibrationError):
        ThresholdTable(kappa=1.0, mu=np.ones(2), sigma=np.zeros(2),
                       tau=np.ones(2), counts=np.array([2, 1]))
    t = table_of([0.5, 0.25])
    back = ThresholdTable.from_dict(t.to_dict())
    assert back.kappa == t.kappa and back.pooled == t.pooled
    for name in ("mu", "sigma", "tau", "counts"):
        np.testing.assert_array_equal(getattr(back, name), getattr(t, name))


def test_negative_tau_allowed_with_warning(caplog):
    protos = np.array([[0.0], [1.0]])
    # class 0 margins 1 and 9 -> mu 5, sigma ~5.66, tau < 0
    z = np.array([[0.0], [-4.0], [1.0], [1.0]])
    y = np.array([0, 0, 1, 1])
    with caplog.at_level(logging.WARNING):
        t = calibrate(z, y, protos)
    assert t.tau[0] < 0.0
    assert any("negative" in r.message for r in caplog.records)
    # a negative threshold never rejects its class
    d = decide(np.array([-0.25]), protos, t)
    assert d.predicted == 0


# ------------------------------------------------------------------ decisions

def test_decide_strict_inequality_boundary():
    protos = np.array([[0.0], [1.0]])
    t = table_of([1.0, 1.0])
    at_tau = decide(np.array([0.0]), protos, t)       # margin exactly 1.0
    assert at_tau.margin == 1.0 and at_tau.predicted == 0
    below = decide(np.array([0.05]), protos, t)       # margin 0.9 < 1.0
    assert below.margin == pytest.approx(0.9, abs=1e-12)
    assert below.predicted == UNKNOWN
    assert below.i1 == 0 and below.threshold == 1.0


def test_equidistant_sample_is_rejected_when_tau_positive():
    protos = np.array([[0.0, 0.0], [2.0, 0.0]])
    d = decide(np.array([1.0, 0.0]), protos, table_of([0.5, 0.5]))
    assert d.margin == 0.0 and d.predicted == UNKNOWN


def test_batch_decisions_match_single():
    rng = np.random.default_rng(1)
    protos = rng.standard_normal((4, 3))
    t = table_of(rng.uniform(0.0, 0.5, size=4))
    zs = rng.standard_normal((12, 3))
    from proto_osr.model import pairwise_sq_dists
    preds, margins = decide_from_dists(pairwise_sq_dists(zs, protos), t)
    for i in range(12):
        d = decide(zs[i], protos, t)
        assert preds[i] == d.predicted
        assert margins[i] == pytest.approx(d.margin, abs=1e-12)


def test_acceptance_monotone_in_kappa():
    rng = np.random.default_rng(2)
    protos = rng.standard_normal((3, 4))
    z_val = np.repeat(protos, 5, axis=0) + 0.05 * rng.standard_normal((15, 4))
    y_val = np.repeat(np.arange(3), 5)
    z_test = rng.standard_normal((200, 4))
    accepted = []
    for kappa in (1.0, 1.5, 2.0, 3.0):
        t = calibrate(z_val, y_val, protos, kappa=kappa)
        from proto_osr.model import pairwise_sq_dists
        preds, _ = decide_from_dists(pairwise_sq_dists(z_test, protos), t)
        accepted.append(int(np.sum(preds != UNKNOWN)))
    assert accepted == sorted(accepted)


def test_probability_mode_rejects_flat_posteriors():
    protos = np.array([[0.0, 0.0], [2.0, 0.0]])
    near = decide_by_probability(np.array([0.0, 0.1]), protos, gamma=1.0, tau_p=0.9)
    assert near.predicted == 0          # confident posterior
    mid = decide_by_probability(np.array([1.0, 0.0]), protos, gamma=1.0, tau_p=0.6)
    assert mid.predicted == UNKNOWN     # p = [0.5, 0.5]


# -------------------------------------------------------------------- metrics

def test_auroc_hand_values():
    assert auroc(np.array([3.0, 4.0]), np.array([1.0, 2.0])) == 1.0
    assert auroc(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 0.0
    assert auroc(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.5
    assert auroc(np.array([]), np.array([1.0])) is None


def test_auroc_matches_pair_counting():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(0, 6, size=rng.integers(1, 15)).astype(float)
        b = rng.integers(0, 6, size=rng.integers(1, 15)).astype(float)
        pairs = (a[:, None] > b[None, :]).sum() + 0.5 * (a[:, None] == b[None, :]).sum()
        assert auroc(a, b) == pytest.approx(pairs / (a.size * b.size), abs=1e-12)


def test_evaluate_hand_fixture():
    protos = np.array([[0.0], [10.0]])
    t = table_of([5.0, 5.0])
    z_known = np.array([[0.0], [4.0], [4.9], [10.0]])
    y_known = np.array([0, 0, 0, 1])
    z_unknown = np.array([[5.0], [9.0]])
    rec = evaluate(z_known, y_known, z_unknown, protos, t)
    assert rec.known_accuracy == pytest.approx(0.75, abs=0)
    assert rec.unknown_rejection == pytest.approx(0.5, abs=0)
    assert rec.auroc == pytest.approx(0.75, abs=1e-12)
    np.testing.assert_array_equal(rec.confusion,
                                  [[2, 0, 1],
                                   [0, 1, 0],
                                   [0, 1, 1]])
    flat = rec.flat()
    assert flat["n_known"] == 4 and flat["n_unknown"] == 2
    cj = rec.confusion_dict()
    assert cj["classes"][-1] == "UNKNOWN"


def test_evaluate_perfect_separation():
    protos = np.array([[0.0], [10.0]])
    t = table_of([1.0, 1.0])
    rec = evaluate(np.array([[0.0], [10.0]]), np.array([0, 1]),
                   np.array([[5.0]]), protos, t)
    assert rec.known_accuracy == 1.0
    assert rec.unknown_rejection == 1.0
    assert rec.auroc == 1.0


def test_evaluate_undefined_partitions_are_none():
    protos = np.array([[0.0], [10.0]])
    t = table_of([1.0, 1.0])
    no_unknown = evaluate(np.array([[0.0]]), np.array([0]),
                          np.zeros((0, 1)), protos, t)
    assert no_unknown.unknown_rejection is None
    assert no_unknown.auroc is None
    assert no_unknown.known_accuracy == 1.0
    no_known = evaluate(np.zeros((0, 1)), np.zeros(0, dtype=int),
                        np.array([[5.0]]), protos, t)
    assert no_known.known_accuracy is None
    with pytest.raises(CalibrationError):
        evaluate(np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros((0, 1)), protos, t)


def test_tune_global_threshold_hits_target():
    margins = np.array([1.0, 2.0, 3.0, 4.0])
    correct = np.array([True, True, False, True])
    tau, acc = tune_global_margin_threshold(margins, correct, target_accuracy=0.75)
    assert acc == 0.75 and tau <= 1.0
    tau, acc = tune_global_margin_threshold(margins, correct, target_accuracy=0.5)
    assert acc == 0.5 and tau == 2.0
    with pytest.raises(CalibrationError):
        tune_global_margin_threshold(np.zeros(0), np.zeros(0, dtype=bool), 0.9)
