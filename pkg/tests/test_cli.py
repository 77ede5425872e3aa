import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from readmit.cli import EXIT_CONFIG, EXIT_OK, EXIT_SCHEMA, load_schema, main, schema_names
from readmit.frame import ModelFrame, VariableSpec, frame_to_json
from readmit.records import serialize
from par_fixtures import THIRTY_EXPECTED, thirty_records

RUN_CONFIG = {
    "master_seed": 3,
    "synth": {
        "n_patients": 150,
        "mean_admissions": 1.3,
        "regimes": {
            "fast": {"m": 1, "r": 2, "lambdas": [0.6, 0.6], "lambda_ss": 1e-9, "lambda_ls": 0.6},
            "slow": {"m": 1, "r": 2, "lambdas": [0.05, 0.05], "lambda_ss": 1e-9, "lambda_ls": 0.05},
        },
        "regime_map": {"rules": [{"when": {"cm_diabetes": True}, "regime": "fast"}], "default": "slow"},
    },
    "forest": {"n_trees": 6, "vars_per_split": 3, "max_cutpoints": 8},
    "evaluate": {"pooling": "record"},
}

REPORTS = {
    "metrics.json": "metrics",
    "calibration.json": "calibration",
    "importance.json": "importance",
    "label_report.json": "label_report",
    "preprocess_report.json": "preprocess_report",
    "resolved_config.json": "resolved_config",
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def validate(path, schema):
    jsonschema.validate(json.loads(path.read_text()), load_schema(schema))


def separable_frame_json(path, n_patients=150, seed=0):
    rng = np.random.default_rng(seed)
    pid = np.repeat(np.arange(n_patients), rng.integers(1, 3, n_patients))
    g = rng.integers(0, 2, n_patients).astype(float)[pid]
    times = np.where(g == 1, rng.uniform(0.5, 4.0, pid.size), 30.0)
    X = np.column_stack([g, rng.normal(size=pid.size)])
    fr = ModelFrame(X, times, g == 1, np.array([f"P{i}" for i in pid], dtype=object),
                    np.array([f"R{i}" for i in range(pid.size)], dtype=object),
                    (VariableSpec("flag", "binary"), VariableSpec("z", "continuous")))
    return write(path, frame_to_json(fr))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write(root / "config.json", RUN_CONFIG)
    codes = [main(["run", "--config", cfg, "--out", str(root / name)]) for name in ("a", "b")]
    return root, codes


def test_pipeline_exit_zero(pipeline):
    _, codes = pipeline
    assert codes == [EXIT_OK, EXIT_OK]


def test_pipeline_reports_are_schema_valid(pipeline):
    root, _ = pipeline
    for fname, schema in REPORTS.items():
        validate(root / "a" / fname, schema)
    jsonschema.validate(RUN_CONFIG, load_schema("run_config"))


def test_pipeline_rerun_byte_identical(pipeline):
    root, _ = pipeline
    files = sorted(p.name for p in (root / "a").iterdir())
    assert files == sorted(p.name for p in (root / "b").iterdir())
    for name in files:
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_resolved_config_records_seed(pipeline):
    root, _ = pipeline
    cfg = json.loads((root / "a" / "resolved_config.json").read_text())["config"]
    assert cfg["master_seed"] == cfg["forest"]["master_seed"] == cfg["synth"]["seed"] == 3
    assert json.loads((root / "a" / "metrics.json").read_text())["master_seed"] == 3


def test_synth_missing_spec_file(tmp_path, capsys):
    assert main(["synth", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "nope.json" in capsys.readouterr().err


def test_synth_writes_dataset_and_sidecar(tmp_path):
    spec = write(tmp_path / "spec.json", {**RUN_CONFIG["synth"], "seed": 9})
    assert main(["synth", "--spec", spec, "--out", str(tmp_path / "o")]) == EXIT_OK
    for f in ("records.csv", "sidecar.jsonl", "resolved_config.json"):
        assert (tmp_path / "o" / f).is_file()
    assert main(["synth", "--spec", spec, "--out", str(tmp_path / "p")]) == EXIT_OK
    assert (tmp_path / "o" / "records.csv").read_bytes() == (tmp_path / "p" / "records.csv").read_bytes()


def test_conflicting_seed_is_config_error(tmp_path):
    cfg = write(tmp_path / "c.json", {**RUN_CONFIG, "forest": {"master_seed": 99, "n_trees": 2}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_unknown_config_section(tmp_path):
    cfg = write(tmp_path / "c.json", {"bogus": {}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


@pytest.fixture()
def fixture_csv(tmp_path):
    p = tmp_path / "thirty.csv"
    serialize(thirty_records(), p)
    return str(p)


LABEL_ARGS = ["--set", 'variables=["age","length_of_stay"]']


def _label(tmp_path, data, name, *extra):
    out = tmp_path / name
    assert main(["label", "--data", data, "--out", str(out), *LABEL_ARGS, *extra]) == EXIT_OK
    return out


def test_label_fixture_matches_hand_count(tmp_path, fixture_csv):
    out = _label(tmp_path, fixture_csv, "lab")
    rep = json.loads((out / "label_report.json").read_text())
    validate(out / "label_report.json", "label_report")
    assert rep["eligible_count"] == THIRTY_EXPECTED["eligible"]
    assert rep["par_count"] == THIRTY_EXPECTED["pars"]
    assert rep["par_series_count"] == THIRTY_EXPECTED["series"]
    assert rep["par_rate"] == pytest.approx(THIRTY_EXPECTED["rate"])


def test_empty_override_file_changes_nothing(tmp_path, fixture_csv):
    empty = tmp_path / "ov.jsonl"
    empty.write_text("")
    a = _label(tmp_path, fixture_csv, "a")
    b = _label(tmp_path, fixture_csv, "b", "--overrides", str(empty))
    assert (a / "label_report.json").read_bytes() == (b / "label_report.json").read_bytes()


def test_disabling_every_rule_gives_zero_rate(tmp_path, fixture_csv):
    from readmit.par_engine import RELATIONS, STEP_III

    rules = json.dumps(list(STEP_III + RELATIONS))
    out = _label(tmp_path, fixture_csv, "off", "--set", f"label.disabled_rules={rules}")
    rep = json.loads((out / "label_report.json").read_text())
    assert rep["par_count"] == 0 and rep["par_rate"] == 0


def test_train_predict_evaluate_separable(tmp_path):
    frame = separable_frame_json(tmp_path / "frame.json")
    seed = ["--seed", "2", "--set", "forest.n_trees=10", "--set", "forest.vars_per_split=2",
            "--set", "evaluate.pooling=\"record\""]
    assert main(["train", "--frame", frame, "--out", str(tmp_path / "m"), *seed]) == EXIT_OK
    model = str(tmp_path / "m" / "model.json")
    assert main(["predict", "--model", model, "--frame", frame, "--out", str(tmp_path / "p"), *seed]) == EXIT_OK
    rows = (tmp_path / "p" / "scores.csv").read_text().splitlines()
    assert len(rows) - 1 == len(json.loads(open(frame).read())["rows"])
    assert main(["evaluate", "--model", model, "--frame", frame, "--out", str(tmp_path / "e"), *seed]) == EXIT_OK
    rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
    validate(tmp_path / "e" / "metrics.json", "metrics")
    assert rep["auroc"] >= 0.85
    assert main(["calibrate", "--model", model, "--frame", frame, "--out", str(tmp_path / "c"), *seed]) == EXIT_OK
    validate(tmp_path / "c" / "calibration.json", "calibration")


def test_validate_seven_repeats(tmp_path):
    frame = separable_frame_json(tmp_path / "frame.json", n_patients=80)
    args = ["--set", "forest.n_trees=3", "--set", "forest.vars_per_split=2", "--set", "validate.n_repeats=7"]
    assert main(["validate", "--frame", frame, "--out", str(tmp_path / "v"), *args]) == EXIT_OK
    rep = json.loads((tmp_path / "v" / "validation.json").read_text())
    validate(tmp_path / "v" / "validation.json", "validation")
    assert len(rep["repeats"]) == 7 and {"train_c", "test_c", "optimism"} <= set(rep)


def test_schema_mismatch_exit_three(tmp_path):
    frame = separable_frame_json(tmp_path / "frame.json")
    assert main(["train", "--frame", frame, "--out", str(tmp_path / "m"), "--set", "forest.n_trees=2",
                 "--set", "forest.vars_per_split=1"]) == EXIT_OK
    d = json.loads(open(frame).read())
    d["schema"] = d["schema"][:1]
    for r in d["rows"]:
        r.pop("z")
    other = write(tmp_path / "other.json", d)
    code = main(["predict", "--model", str(tmp_path / "m" / "model.json"), "--frame", other,
                 "--out", str(tmp_path / "p")])
    assert code == EXIT_SCHEMA


def test_docs_and_console_script(tmp_path):
    assert main(["docs", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert "## label" in (tmp_path / "d" / "cli.md").read_text()
    assert sorted(p.stem for p in (tmp_path / "d" / "schemas").iterdir()) == schema_names()
    res = subprocess.run([sys.executable, "-m", "readmit.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("readmit")
