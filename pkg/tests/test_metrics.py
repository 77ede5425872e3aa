import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from readmit.metrics import (
    ConfusionCounts,
    UndefinedMetricError,
    auroc,
    calibration_csv,
    calibration_table,
    classification_metrics,
    op_ratio,
    optimism_corrected,
    patient_stratified_split,
    roc_curve,
    split_sample_validation,
    threshold_sweep,
    trapezoid_area,
)
from readmit.frame import ModelFrame, VariableSpec

# (tp, fn, tn, fp) chosen so every printed rate of the comparison table
# comes back at its printed precision; MSE is not a function of counts
PUBLISHED_COUNTS = {
    "proposal": ((731, 64, 4692, 113), (91.95, 97.65, 86.61, 98.65, .892, .874)),
    "random_forest": ((321, 42, 2129, 58), (88.43, 97.35, 84.70, 98.07, .865, .843)),
    "svm": ((305, 49, 2081, 53), (86.16, 97.52, 85.20, 97.70, .857, .833)),
    "logistic": ((658, 131, 4631, 133), (83.40, 97.21, 83.19, 97.25, .833, .805)),
    "neural_net": ((585, 125, 4156, 126), (82.39, 97.06, 82.28, 97.08, .823, .794)),
}


def brute_auroc(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [a for a, t in zip(s, y) if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_mcc(p, y):
    tp = sum(1 for a, b in zip(p, y) if a and b)
    tn = sum(1 for a, b in zip(p, y) if not a and not b)
    fp = sum(1 for a, b in zip(p, y) if a and not b)
    fn = sum(1 for a, b in zip(p, y) if not a and b)
    return (tp * tn - fp * fn) / math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))


def _fixture(rng, n=30, ties=True):
    y = rng.integers(0, 2, n).astype(bool)
    y[0], y[1] = True, False
    s = rng.integers(0, 8, n) / 8.0 if ties else rng.random(n)
    return s, y


def test_perfect_classifier():
    m = classification_metrics(ConfusionCounts(tp=10, fp=0, tn=15, fn=0))
    assert all(m[k] == 1 for k in ("sensitivity", "specificity", "ppv", "npv", "mcc", "accuracy"))


def test_counts_formula_example():
    m = classification_metrics(ConfusionCounts(tp=9195, fp=235, tn=9765, fn=805))
    assert round(100 * m["sensitivity"], 2) == 91.95 and round(100 * m["specificity"], 2) == 97.65


@pytest.mark.parametrize("name", list(PUBLISHED_COUNTS))
def test_published_rates_from_counts(name):
    (tp, fn, tn, fp), printed = PUBLISHED_COUNTS[name]
    m = classification_metrics(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
    got = (round(100 * m["sensitivity"], 2), round(100 * m["specificity"], 2), round(100 * m["ppv"], 2),
           round(100 * m["npv"], 2), round(m["f_score"], 3), round(m["mcc"], 3))
    assert got == pytest.approx(printed, abs=1e-9)


def test_undefined_metrics_are_none():
    m = classification_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=0))
    assert m["sensitivity"] is None and m["ppv"] is None and m["mcc"] is None and m["specificity"] == 1
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)


def test_mcc_matches_formula_on_random_fixtures():
    rng = np.random.default_rng(3)
    for _ in range(30):
        y = rng.integers(0, 2, 20).astype(bool)
        p = rng.integers(0, 2, 20).astype(bool)
        y[:2], p[:2] = [True, False], [True, False]
        m = classification_metrics(ConfusionCounts.from_predictions(p, y))
        assert m["mcc"] == pytest.approx(brute_mcc(p, y), rel=1e-12)


def test_mse_from_scores():
    m = classification_metrics(ConfusionCounts(1, 0, 1, 0), scores=[0.8, 0.1], labels=[1, 0])
    assert m["mse"] == pytest.approx((0.04 + 0.01) / 2)


def test_auroc_brute_force_fixtures():
    rng = np.random.default_rng(0)
    for i in range(50):
        s, y = _fixture(rng, ties=i % 2 == 0)
        assert auroc(s, y) == brute_auroc(s, y)


def test_auroc_trivial_cases():
    assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_agrees_with_sklearn():
    from sklearn.metrics import roc_auc_score

    rng = np.random.default_rng(8)
    s, y = _fixture(rng, n=500)
    assert auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auroc_properties(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    a = auroc(s, y)
    assert a == pytest.approx(1 - auroc(-s, y), abs=1e-12)
    assert a == pytest.approx(auroc(np.exp(s) * 3 + 1, y), abs=1e-12)
    assert trapezoid_area(roc_curve(s, y)) == pytest.approx(a, abs=1e-12)


def test_roc_two_points_and_reflection():
    assert roc_curve([0.9, 0.1], [1, 0]) == [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    rng = np.random.default_rng(2)
    s, y = _fixture(rng, n=60, ties=False)
    pts = roc_curve(s, y)
    xs, ys = zip(*pts)
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert list(xs) == sorted(xs) and list(ys) == sorted(ys)
    assert trapezoid_area(roc_curve(-s, y)) == pytest.approx(1 - trapezoid_area(pts), abs=1e-12)


def test_threshold_sweep_monotone():
    rng = np.random.default_rng(4)
    s, y = _fixture(rng, n=200, ties=False)
    rows = threshold_sweep(s, y, np.linspace(0, 1, 21))
    sens = [r["sensitivity"] for r in rows]
    spec = [r["specificity"] for r in rows]
    assert all(a >= b for a, b in zip(sens, sens[1:]))
    assert all(a <= b for a, b in zip(spec, spec[1:]))


def test_op_ratio_published_row():
    assert round(op_ratio(183, 201), 3) == 0.910
    assert op_ratio(3, 0) is None


def test_calibration_sums_and_ratio():
    rng = np.random.default_rng(1)
    s = rng.random(1000)
    y = rng.random(1000) < s
    for binning in ("equal_width", "equal_count"):
        rows = calibration_table(s, y, binning=binning)
        assert len(rows) == 10 and [r.decile for r in rows] == list(range(1, 11))
        assert sum(r.sample_size for r in rows) == 1000 and sum(r.observed_par for r in rows) == y.sum()
        for r in rows:
            if r.predicted_par > 0:
                assert r.op_ratio == r.observed_par / r.predicted_par
    assert calibration_csv(rows).splitlines()[0] == "decile,n,predicted,observed,op_ratio"


def test_perfectly_calibrated_scores():
    rng = np.random.default_rng(12)
    s = rng.uniform(0.2, 0.9, 10_000)
    y = rng.random(s.size) < s
    for r in calibration_table(s, y):
        assert 0.9 <= r.op_ratio <= 1.1


def test_all_negative_labels():
    rows = calibration_table(np.linspace(0.1, 0.9, 50), np.zeros(50))
    assert all(r.observed_par == 0 and r.op_ratio in (0.0, None) for r in rows)


def test_calibration_rejects_out_of_range():
    with pytest.raises(ValueError):
        calibration_table([0.2, 1.2], [0, 1])


def test_optimism_arithmetic():
    out = optimism_corrected(0.839, 0.821)
    assert out["optimism"] == pytest.approx(0.018) and out["corrected_c"] == pytest.approx(0.821)


def _frame(n_patients=80, seed=0):
    rng = np.random.default_rng(seed)
    pid = np.repeat(np.arange(n_patients), 2)
    ev = rng.random(pid.size) < 0.3
    x = ev + rng.normal(scale=0.5, size=pid.size)
    times = np.where(ev, 5.0, 30.0)
    return ModelFrame(x[:, None], times, ev, pid.astype(str).astype(object),
                      np.arange(pid.size).astype(str).astype(object), (VariableSpec("x", "continuous"),))


def test_patient_split_keeps_patients_whole():
    fr = _frame()
    m = patient_stratified_split(fr.patient_ids, fr.labels, 0.5, np.random.default_rng(0))
    for p in np.unique(fr.patient_ids):
        assert len(set(m[fr.patient_ids == p])) == 1


def test_constant_scorer_has_no_optimism():
    out = split_sample_validation(_frame(), lambda tr, seed: (lambda f: np.zeros(f.n)), n_repeats=3)
    assert out["train_c"] == out["test_c"] == 0.5 and out["optimism"] == 0


def test_split_validation_reproducible():
    trainer = lambda tr, seed: (lambda f: f.X[:, 0])  # noqa: E731
    a = split_sample_validation(_frame(), trainer, n_repeats=1, seed=4)
    b = split_sample_validation(_frame(), trainer, n_repeats=1, seed=4)
    assert a == b and a["test_c"] > 0.7


def test_degenerate_split_raises():
    fr = _frame()
    fr2 = ModelFrame(fr.X, fr.times, np.zeros(fr.n, bool), fr.patient_ids, fr.record_ids, fr.schema)
    with pytest.raises(UndefinedMetricError):
        split_sample_validation(fr2, lambda tr, s: (lambda f: np.zeros(f.n)))
