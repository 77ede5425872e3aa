import math

import numpy as np
import pytest

from readmit.forest import (
    ForestConfig,
    SurvivalForest,
    grow_tree,
    oob_error,
    oob_mask,
    oob_predict,
    patient_index,
    predict,
    subject_bootstrap,
    train,
    tree_seeds,
    variable_importance,
    vote_matrix,
)
from readmit.frame import ModelFrame, SchemaMismatchError, VariableSpec, variables_by_name
from readmit.synth import generate, truth_frame, two_regime_spec

NAMES = ["cm_diabetes", "age", "sex", "income", "cm_anemia"]


@pytest.fixture(scope="module")
def regime_frame():
    res = generate(two_regime_spec(600, seed=1))
    return truth_frame(res, variables_by_name(NAMES))


@pytest.fixture(scope="module")
def small_forest(regime_frame):
    cfg = ForestConfig(n_trees=12, vars_per_split=2, max_cutpoints=8, master_seed=5)
    return train(regime_frame, cfg)


def separable_frame(n_patients=300, seed=0):
    """Class fixed by one patient-level flag: fast events vs. censored at 30."""
    rng = np.random.default_rng(seed)
    reps = rng.integers(1, 3, n_patients)
    pid = np.repeat(np.arange(n_patients), reps)
    n = pid.size
    g = rng.integers(0, 2, n_patients).astype(float)[pid]
    times = np.where(g == 1, rng.uniform(0.5, 4.0, n), 30.0)
    X = np.column_stack([g, rng.normal(size=n), rng.integers(0, 2, n)])
    schema = (VariableSpec("flag", "binary"), VariableSpec("z", "continuous"), VariableSpec("b", "binary"))
    return ModelFrame(X, times, g == 1, np.array([f"P{i}" for i in pid], dtype=object),
                      np.array([f"R{i}" for i in range(n)], dtype=object), schema)


def test_bootstrap_single_patient():
    counts = subject_bootstrap(1, np.random.default_rng(0))
    assert counts.tolist() == [1]
    assert subject_bootstrap(1, np.random.default_rng(0), size=5).tolist() == [5]


def test_bootstrap_rejects_empty():
    with pytest.raises(ValueError):
        subject_bootstrap(0, np.random.default_rng(0))


def test_bootstrap_in_bag_fraction():
    rng = np.random.default_rng(1)
    fr = [np.mean(subject_bootstrap(2000, rng) > 0) for _ in range(200)]
    assert abs(np.mean(fr) - (1 - math.exp(-1))) < 0.01


def test_bootstrap_deterministic():
    a = subject_bootstrap(500, np.random.default_rng(tree_seeds(3, 2)[1]))
    b = subject_bootstrap(500, np.random.default_rng(tree_seeds(3, 2)[1]))
    np.testing.assert_array_equal(a, b)


def test_subject_integrity(regime_frame, small_forest):
    M = oob_mask(small_forest, regime_frame)
    _, inv = patient_index(regime_frame.patient_ids)
    for row in M:
        for p in np.unique(inv):
            assert len(set(row[inv == p].tolist())) == 1


def test_oob_is_complement_of_in_bag(regime_frame):
    cfg = ForestConfig(n_trees=1, vars_per_split=2, max_cutpoints=8, master_seed=2)
    f = train(regime_frame, cfg)
    counts = np.array(f.trees[0].inbag)
    pos = {p: i for i, p in enumerate(f.patients)}
    expected = np.array([counts[pos[str(p)]] == 0 for p in regime_frame.patient_ids])
    np.testing.assert_array_equal(oob_mask(f, regime_frame)[0], expected)


def test_single_tree_forest_predicts_its_leaf_class(regime_frame):
    f = train(regime_frame, ForestConfig(n_trees=1, vars_per_split=2, max_cutpoints=8, vote_pooling="record"))
    p = predict(f, regime_frame)
    np.testing.assert_array_equal(p.predicted, f.trees[0].classify(regime_frame.X))
    assert set(np.unique(p.vote_fraction)) <= {0.0, 1.0}


def test_determinism_across_workers(regime_frame):
    cfg = ForestConfig(n_trees=6, vars_per_split=2, max_cutpoints=8, master_seed=11)
    a = train(regime_frame, cfg, n_jobs=1)
    b = train(regime_frame, cfg, n_jobs=3)
    assert a.digest() == b.digest()
    np.testing.assert_array_equal(predict(a, regime_frame).vote_fraction, predict(b, regime_frame).vote_fraction)


def test_round_trip(regime_frame, small_forest, tmp_path):
    path = tmp_path / "model.json"
    small_forest.save(path)
    back = SurvivalForest.load(path)
    assert back.to_json() == small_forest.to_json()
    np.testing.assert_array_equal(predict(back, regime_frame).vote_fraction,
                                  predict(small_forest, regime_frame).vote_fraction)


def test_tree_structure_is_binary_and_unpruned(small_forest):
    for t in small_forest.trees:
        for i, f in enumerate(t.feature):
            if f >= 0:
                assert t.left[i] > i and t.right[i] > i
            else:
                assert t.left[i] == -1 and t.right[i] == -1
        assert len(small_forest.trees) == small_forest.config.n_trees


def test_duplicate_trees_keep_classes(regime_frame, small_forest):
    doubled = SurvivalForest(small_forest.trees * 2, small_forest.config, small_forest.schema,
                             small_forest.patients)
    a, b = predict(small_forest, regime_frame), predict(doubled, regime_frame)
    np.testing.assert_array_equal(a.predicted, b.predicted)
    np.testing.assert_allclose(a.vote_fraction, b.vote_fraction)


def test_unit_weights_reduce_to_majority(regime_frame, small_forest):
    p = predict(small_forest, regime_frame, pooling="record")
    V = vote_matrix(small_forest, regime_frame.X)
    np.testing.assert_allclose(p.vote_fraction, V.mean(axis=0))
    np.testing.assert_array_equal(p.predicted, (V.mean(axis=0) >= 0.5).astype(int))


def test_weighted_votes_shift_fraction(regime_frame):
    cfg = ForestConfig(n_trees=4, vars_per_split=2, max_cutpoints=8,
                       class_weights={"no_readmission": 1.0, "par": 8.0}, weight_splits=False)
    f = train(regime_frame, cfg)
    V = vote_matrix(f, regime_frame.X)
    k = V.sum(axis=0)
    ref = 8 * k / (8 * k + (V.shape[0] - k))
    np.testing.assert_allclose(predict(f, regime_frame, pooling="record").vote_fraction, ref)


def test_unanimous_par_vote():
    fr = separable_frame(120, seed=4)
    f = train(fr, ForestConfig(n_trees=3, vars_per_split=3, vote_pooling="record"))
    p = predict(f, fr)
    fast = fr.X[:, 0] == 1
    assert np.all(p.vote_fraction[fast] == 1.0) and np.all(p.predicted[fast] == 1)


def test_permuting_in_bag_rows_leaves_oob_error(regime_frame):
    f = train(regime_frame, ForestConfig(n_trees=3, vars_per_split=2, max_cutpoints=8, master_seed=8))
    M = oob_mask(f, regime_frame)
    never_oob = np.flatnonzero(~M.any(axis=0))
    assert never_oob.size > 10
    X = regime_frame.X.copy()
    perm = np.random.default_rng(0).permutation(never_oob)
    X[never_oob] = X[perm]
    shuffled = ModelFrame(X, regime_frame.times, regime_frame.events, regime_frame.patient_ids,
                          regime_frame.record_ids, regime_frame.schema)
    assert oob_error(f, shuffled) == oob_error(f, regime_frame)


def test_separable_cohort_oob_error_small():
    fr = separable_frame(300, seed=1)
    f = train(fr, ForestConfig(n_trees=15, vars_per_split=3, max_cutpoints=8, master_seed=1))
    err = oob_error(f, fr)
    assert err.overall < 0.05
    assert err.n_scored + err.n_unscored == fr.n


def test_vote_fraction_ranks_regimes(regime_frame, small_forest):
    s = predict(small_forest, regime_frame, pooling="record").vote_fraction
    fast = regime_frame.X[:, 0] == 1
    concordant = np.mean(s[fast][:, None] > s[~fast][None, :])
    assert concordant >= 0.95


def test_root_split_recovers_regime_covariate(regime_frame):
    # every variable is a candidate at each node
    cfg = ForestConfig(n_trees=50, vars_per_split=len(NAMES), max_cutpoints=8, master_seed=3)
    f = train(regime_frame, cfg)
    hits = sum(t.feature[0] == 0 for t in f.trees)
    assert hits >= 45


def test_noise_variables_not_significant(regime_frame):
    noise = [n for n in NAMES if n != "cm_diabetes"]
    passes = {n: 0 for n in noise}
    drivers_first = 0
    for seed in range(20):
        f = train(regime_frame, ForestConfig(n_trees=20, vars_per_split=2, max_cutpoints=8, master_seed=seed))
        rows = variable_importance(f, regime_frame)
        drivers_first += rows[0].variable == "cm_diabetes"
        for r in rows:
            if r.variable in passes and r.significance > 0.05:
                passes[r.variable] += 1
    assert all(v >= 18 for v in passes.values()), passes
    assert drivers_first >= 18


def test_importance_table_shape(regime_frame, small_forest):
    rows = variable_importance(small_forest, regime_frame)
    assert [r.variable for r in rows] != [] and len(rows) == len(NAMES)
    assert set(rows[0].to_dict()) == {"variable", "raw_score", "z_score", "significance"}
    scores = [r.raw_score for r in rows]
    assert scores == sorted(scores, reverse=True)


def test_schema_mismatch_rejected(regime_frame, small_forest):
    other = ModelFrame(regime_frame.X[:, :4], regime_frame.times, regime_frame.events, regime_frame.patient_ids,
                       regime_frame.record_ids, regime_frame.schema[:4])
    with pytest.raises(SchemaMismatchError):
        predict(small_forest, other)
    with pytest.raises(SchemaMismatchError):
        oob_predict(small_forest, other)


def test_config_validation(regime_frame):
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(class_weights={"no_readmission": 0.0, "par": 1.0})
    with pytest.raises(ValueError):
        train(regime_frame, ForestConfig(vars_per_split=len(NAMES) + 1))
    # published configurations are accepted
    ForestConfig(n_trees=6000, vars_per_split=5)
    ForestConfig(n_trees=10000, vars_per_split=4, class_weights={"no_readmission": 1.0, "par": 8.0})


def test_single_record_in_bag_gives_root_only_tree():
    fr = separable_frame(1, seed=0).subset(np.arange(1))
    tree = grow_tree(fr, ForestConfig(n_trees=1, vars_per_split=1), np.random.SeedSequence(0))
    assert tree.n_nodes == 1


def test_missing_values_rejected(regime_frame):
    X = regime_frame.X.copy()
    X[0, 1] = np.nan
    fr = ModelFrame(X, regime_frame.times, regime_frame.events, regime_frame.patient_ids,
                    regime_frame.record_ids, regime_frame.schema)
    with pytest.raises(ValueError):
        train(fr, ForestConfig(n_trees=1, vars_per_split=1))
