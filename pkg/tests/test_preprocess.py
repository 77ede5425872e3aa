import json
import math

import numpy as np
import pytest

from readmit.frame import ModelFrame, VariableSpec
from readmit.preprocess import (
    DEFAULT_FIX_RULES,
    FixRule,
    FixRuleConflict,
    PreprocessConfig,
    PreprocessError,
    PreprocessReport,
    apply_consistency_fixes,
    apply_report,
    breiman_replace,
    discretize_distance,
    distance_level,
    get_field,
    hot_deck_impute,
    lof_outliers,
    lof_scores,
    preprocess,
    set_fields,
    standardize,
)
from readmit.records import Dataset, records_equal
from readmit.synth import generate, two_regime_spec
from par_fixtures import rec


@pytest.fixture(scope="module")
def synth_records():
    return list(generate(two_regime_spec(300, seed=2)).records)


def lof_oracle(Z, k):
    """Plain O(n^2) local outlier factor with exactly k neighbours per point."""
    n = len(Z)
    D = np.sqrt(((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1))
    nbrs, kdist = [], np.empty(n)
    for i in range(n):
        order = [j for j in np.argsort(D[i], kind="stable") if j != i][:k]
        nbrs.append(order)
        kdist[i] = D[i, order[-1]]
    lrd = np.empty(n)
    for i in range(n):
        reach = [max(kdist[j], D[i, j]) for j in nbrs[i]]
        lrd[i] = 1.0 / (sum(reach) / k)
    return np.array([np.mean([lrd[j] for j in nbrs[i]]) / lrd[i] for i in range(n)])


# ---- hot deck


def test_hot_deck_identity_without_missing():
    recs = [rec(f"R{i}", f"P{i}", 0, 3, "428.0", "HF", can_score=50 + i) for i in range(5)]
    out, entries = hot_deck_impute(recs, ("can_score",))
    assert entries == [] and out == recs


def test_hot_deck_single_donor_copied():
    recs = [rec("R1", "P1", 0, 3, "428.0", "HF", can_score=77), rec("R2", "P2", 0, 3, "428.0", "HF")]
    out, entries = hot_deck_impute(recs, ("can_score",), seed=3)
    assert out[1].covariates.can_score == 77
    assert entries == [("R2", "can_score", "R1", 77, False)]


def test_hot_deck_empty_cell_falls_back_and_flags():
    recs = [rec("R1", "P1", 0, 3, "428.0", "HF", can_score=40),
            rec("R2", "P2", 0, 3, "428.0", "HF", sex="F")]
    out, entries = hot_deck_impute(recs, ("can_score",))
    assert out[1].covariates.can_score == 40 and entries[0][4] is True


def test_hot_deck_no_donors_anywhere():
    with pytest.raises(PreprocessError):
        hot_deck_impute([rec("R1", "P1", 0, 3, "428.0", "HF")], ("can_score",))


def test_hot_deck_donors_stay_in_cell(synth_records):
    holes = [set_fields(r, {"income": None}) if i % 4 == 0 else r for i, r in enumerate(synth_records)]
    by_id = {r.record_id: r for r in holes}
    _, entries = hot_deck_impute(holes, ("income",), seed=1)
    for rid, _f, donor, value, fallback in entries:
        a, d = by_id[rid], by_id[donor]
        assert not fallback and (a.cohort, a.covariates.sex) == (d.cohort, d.covariates.sex)
        assert value == d.covariates.income is not None


def test_hot_deck_mar_mean_within_ten_percent(synth_records):
    rng = np.random.default_rng(0)
    complete = [r for r in synth_records if r.covariates.can_score is not None]
    truth = np.mean([r.covariates.can_score for r in complete])
    drop = rng.random(len(complete)) < 0.2
    holes = [set_fields(r, {"can_score": None}) if m else r for r, m in zip(complete, drop)]
    out, entries = hot_deck_impute(holes, ("can_score",), seed=4)
    assert len(entries) == drop.sum()
    assert abs(np.mean([r.covariates.can_score for r in out]) - truth) <= 0.1 * truth


def test_hot_deck_deterministic_under_seed(synth_records):
    holes = [set_fields(r, {"income": None}) if i % 3 == 0 else r for i, r in enumerate(synth_records)]
    assert hot_deck_impute(holes, ("income",), seed=9)[1] == hot_deck_impute(holes, ("income",), seed=9)[1]


# ---- local outlier factor


def test_lof_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(10):
        Z = rng.normal(size=(20, 3))
        k = int(rng.integers(2, 8))
        np.testing.assert_allclose(lof_scores(Z, k), lof_oracle(Z, k), rtol=1e-10)


def _cluster_records(n=19, far=True, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(rec(f"R{i:02d}", f"P{i}", 0, 3, "428.0", "HF", age=int(70 + rng.integers(-3, 4)),
                       past_year_hospitalizations=int(rng.integers(0, 3))))
    if far:
        out.append(rec("FAR", "PX", 0, 40, "428.0", "HF", age=99, past_year_hospitalizations=30))
    return out


def test_far_point_has_max_lof_and_is_flagged():
    recs = _cluster_records()
    Z = standardize(np.array([[float(get_field(r, f)) for f in ("age", "length_of_stay",
                                                                "past_year_hospitalizations")] for r in recs]))
    s = lof_oracle(Z, 5)
    assert int(np.argmax(s)) == len(recs) - 1
    flagged = lof_outliers(recs, k_neighbors=5, threshold=1.5,
                           features=("age", "length_of_stay", "past_year_hospitalizations"))
    assert "FAR" in [rid for rid, _ in flagged]
    assert max(flagged, key=lambda x: x[1])[0] == "FAR"


def test_identical_points_not_flagged():
    recs = [rec(f"R{i}", f"P{i}", 0, 3, "428.0", "HF") for i in range(25)]
    assert lof_outliers(recs, k_neighbors=5) == []


def test_infinite_threshold_flags_nothing():
    assert lof_outliers(_cluster_records(), k_neighbors=5, threshold=math.inf) == []


def test_lof_needs_enough_records():
    with pytest.raises(PreprocessError):
        lof_outliers(_cluster_records(5, far=False), k_neighbors=5)


# ---- consistency fixes


def test_pow_fix():
    r = rec("R1", "P1", 0, 3, "428.0", "HF", pow=True, veteran=False)
    (out,), applied = apply_consistency_fixes([r])
    assert out.covariates.veteran is True and applied == [("R1", "pow_implies_veteran")]


def test_fix_no_matches():
    recs = [rec("R1", "P1", 0, 3, "428.0", "HF")]
    out, applied = apply_consistency_fixes(recs)
    assert out == recs and applied == []


def test_fix_three_of_ten():
    recs = [rec(f"R{i}", f"P{i}", 0, 3, "428.0", "HF", pow=i < 3, veteran=not i < 3) for i in range(10)]
    _, applied = apply_consistency_fixes(recs, DEFAULT_FIX_RULES)
    assert sorted(rid for rid, _ in applied) == ["R0", "R1", "R2"]


def test_contradictory_rules_rejected():
    a = FixRule("a", {"pow": True, "veteran": False}, {"veteran": True})
    b = FixRule("b", {"pow": True}, {"veteran": False})
    with pytest.raises(FixRuleConflict):
        apply_consistency_fixes([], [a, b])
    with pytest.raises(FixRuleConflict):
        apply_consistency_fixes([], [FixRule("loop", {"pow": True}, {"pow": True})])
    with pytest.raises(PreprocessError):
        apply_consistency_fixes([], [FixRule("x", {"bogus": 1}, {"veteran": True})])


# ---- distance


@pytest.mark.parametrize("miles,level", [(0, "near"), (10, "near"), (24.99, "near"), (25, "middle"),
                                         (50, "middle"), (50.01, "far"), (60, "far")])
def test_distance_levels(miles, level):
    assert distance_level(miles) == level


def test_kmeans_thresholds_reported():
    rng = np.random.default_rng(0)
    miles = np.concatenate([rng.uniform(0, 5, 30), rng.uniform(40, 45, 30), rng.uniform(200, 210, 30)])
    recs = [rec(f"R{i}", f"P{i}", 0, 3, "428.0", "HF", distance_miles=float(m)) for i, m in enumerate(miles)]
    out, (lo, hi), levels = discretize_distance(recs, mode="kmeans")
    assert 5 < lo < 40 and 45 < hi < 200
    assert [levels[r.record_id] for r in out] == ["near"] * 30 + ["middle"] * 30 + ["far"] * 30
    with pytest.raises(PreprocessError):
        discretize_distance(recs, mode="quantile")


# ---- model-time fill


def _frame(X, schema):
    n = len(X)
    return ModelFrame(np.asarray(X, float), np.ones(n), np.zeros(n, bool), np.arange(n).astype(str).astype(object),
                      np.arange(n).astype(str).astype(object), schema)


def test_breiman_median_and_mode():
    schema = (VariableSpec("age", "continuous"), VariableSpec("grp", "categorical", ("A", "B")))
    fr = breiman_replace(_frame([[60, 0], [70, 0], [80, 1], [np.nan, 0], [65, np.nan]], schema))
    assert fr.X[3, 0] == 67.5  # median of {60, 65, 70, 80}
    assert fr.X[4, 1] == 0.0
    fr = breiman_replace(_frame([[60, 0], [70, 1], [80, 0], [np.nan, 0]], schema))
    assert fr.X[3, 0] == 70.0
    assert fr.fill_values == {"age": 70.0, "grp": 0.0}


def test_breiman_mode_tie_goes_to_first_level():
    schema = (VariableSpec("grp", "categorical", ("A", "B")),)
    assert breiman_replace(_frame([[1], [0], [np.nan]], schema)).X[2, 0] == 0.0


def test_breiman_all_missing_names_field():
    schema = (VariableSpec("income", "continuous"),)
    with pytest.raises(PreprocessError, match="income"):
        breiman_replace(_frame([[np.nan], [np.nan]], schema))


# ---- pipeline


def _raw(synth_records):
    rng = np.random.default_rng(1)
    out = []
    for i, r in enumerate(synth_records):
        if i % 17 == 0:
            r = set_fields(r, {"pow": True, "veteran": False})
        if rng.random() < 0.1:
            r = set_fields(r, {"can_score": None})
        out.append(r)
    return Dataset(tuple(out))


def test_pipeline_counts_and_report(synth_records):
    raw = _raw(synth_records)
    out, report = preprocess(raw)
    assert len(out) == len(raw) - len(report.outliers_removed)
    assert report.fixes_applied and report.imputed
    for r in out:
        assert r.covariates.veteran or not r.covariates.pow
        assert r.covariates.can_score is not None
        assert r.covariates.distance_level == distance_level(r.covariates.distance_miles)


def test_apply_report_reconstructs_output(synth_records):
    raw = _raw(synth_records)
    out, report = preprocess(raw, PreprocessConfig(seed=3))
    back = PreprocessReport.from_dict(json.loads(report.to_json()))
    replayed = apply_report(raw, back)
    assert len(replayed) == len(out)
    assert all(records_equal(a, b) for a, b in zip(out, replayed))


def test_pipeline_idempotent(synth_records):
    once, _ = preprocess(_raw(synth_records))
    twice, report = preprocess(once)
    assert report.outliers_removed == [] and report.imputed == [] and report.fixes_applied == []
    assert all(records_equal(a, b) for a, b in zip(once, twice)) and len(once) == len(twice)


def test_config_round_trip():
    cfg = PreprocessConfig(lof_threshold=math.inf, discretization="kmeans")
    assert PreprocessConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(PreprocessError):
        PreprocessConfig.from_dict({"lof_kk": 3})
