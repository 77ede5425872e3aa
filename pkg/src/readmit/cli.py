"""Command-line interface: ``readmit <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 schema
mismatch between a model and its data.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .forest import (
    ForestConfig,
    SurvivalForest,
    oob_error,
    oob_predict,
    oob_probability,
    predict,
    train,
    variable_importance,
)
from .frame import (
    DEFAULT_VARIABLES,
    ModelFrame,
    SchemaMismatchError,
    build_frame,
    frame_from_json,
    frame_to_json,
    outcomes_from_labels,
    variables_by_name,
)
from .metrics import (
    ConfusionCounts,
    UndefinedMetricError,
    auroc,
    calibration_csv,
    calibration_table,
    classification_metrics,
    roc_csv,
    roc_curve,
    split_sample_validation,
)
from .par_engine import ParConfig, RuleConfigError, RuleTables, default_rule_tables, label, read_overrides
from .phase_type import EmConfig, ObservationSet, fit_em, mean
from .preprocess import PreprocessConfig, PreprocessError, breiman_replace, preprocess
from .records import Dataset, IngestError, SchemaError, ingest, serialize, write_rejects
from .synth import CohortSpec, SpecError, generate, write_sidecar

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_SCHEMA = 0, 1, 2, 3
log = logging.getLogger("readmit")


class ConfigError(Exception):
    pass


CONFIG_ERRORS = (ConfigError, SpecError, RuleConfigError, PreprocessError, SchemaError)

DEFAULT_CONFIG = {
    "master_seed": 0,
    "n_jobs": 1,
    "synth": {},
    "preprocess": {},
    "label": {},
    "rules_dir": None,
    "overrides": None,
    "variables": None,
    "forest": {},
    "evaluate": {"oob": True, "pooling": None, "n_bins": 10, "binning": "equal_width", "score": "probability"},
    "validate": {"n_repeats": 7, "split": 0.5},
    "importance": True,
}


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
    node[keys[-1]] = value


def load_json(path, what: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {p} is not valid JSON: {exc}") from exc


def _seeded(section: dict, key: str, seed: int, name: str) -> dict:
    section = dict(section)
    if key in section and section[key] != seed:
        raise ConfigError(f"{name}.{key}={section[key]} conflicts with master_seed={seed}; set master_seed only")
    section[key] = seed
    return section


def resolve_config(args) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    user = {}
    if getattr(args, "config", None):
        user = load_json(args.config, "config")
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if getattr(args, "spec", None):
        spec = load_json(args.spec, "spec")
        if not isinstance(spec, dict):
            raise ConfigError("spec must be a JSON object")
        cfg["synth"] = spec
        # a standalone spec carries its own seed unless one is given explicitly
        if "seed" in spec and args.seed is None and "master_seed" not in user:
            cfg["master_seed"] = spec["seed"]
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(cfg, k, v)
    if getattr(args, "seed", None) is not None:
        cfg["master_seed"] = args.seed
    if getattr(args, "n_jobs", None) is not None:
        cfg["n_jobs"] = args.n_jobs
    seed = int(cfg["master_seed"])
    cfg["synth"] = _seeded(cfg["synth"] or {}, "seed", seed, "synth")
    cfg["preprocess"] = _seeded(cfg["preprocess"] or {}, "seed", seed, "preprocess")
    cfg["forest"] = _seeded(cfg["forest"] or {}, "master_seed", seed, "forest")
    # validate every section by building it
    forest_config(cfg)
    par_config(cfg)
    preprocess_config(cfg)
    schema_of(cfg)
    if cfg["evaluate"]["score"] not in ("probability", "vote"):
        raise ConfigError("evaluate.score must be 'probability' or 'vote'")
    return cfg


def _build(cls, d, name):
    try:
        return cls.from_dict(d)
    except CONFIG_ERRORS:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {name} configuration: {exc}") from exc


def forest_config(cfg) -> ForestConfig:
    d = dict(cfg["forest"])
    known = {f.name for f in fields(ForestConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown forest option(s) {sorted(unknown)}")
    return _build(ForestConfig, d, "forest")


def par_config(cfg) -> ParConfig:
    return _build(ParConfig, cfg["label"], "label")


def preprocess_config(cfg) -> PreprocessConfig:
    return _build(PreprocessConfig, cfg["preprocess"], "preprocess")


def synth_spec(cfg) -> CohortSpec:
    if not cfg["synth"] or set(cfg["synth"]) == {"seed"}:
        raise ConfigError("no synth spec given")
    return _build(CohortSpec, cfg["synth"], "synth")


def schema_of(cfg) -> tuple:
    if cfg.get("variables") is None:
        return DEFAULT_VARIABLES
    try:
        return variables_by_name(cfg["variables"])
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc


def rule_tables(cfg) -> RuleTables:
    if cfg.get("rules_dir"):
        return RuleTables.load(cfg["rules_dir"])
    return default_rule_tables()


# ---------------------------------------------------------------------------
# I/O helpers


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_resolved(out: Path, command: str, cfg: dict) -> None:
    write_json(out / "resolved_config.json", {"command": command, "version": __version__, "config": cfg})


def outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_frame(path) -> ModelFrame:
    return frame_from_json(load_json(path, "frame"))


def read_model(path) -> SurvivalForest:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"model file not found: {p}")
    return SurvivalForest.load(p)


def read_records(path) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"data file not found: {p}")
    return ingest(p)


def _clean(x):
    if x is None:
        return None
    x = float(x)
    return None if not np.isfinite(x) else x


def model_frame(forest: SurvivalForest, frame: ModelFrame) -> ModelFrame:
    """Fill any missing values with the fills learned at training time."""
    if np.isnan(frame.X).any():
        if forest.fingerprint != frame.fingerprint:
            raise SchemaMismatchError(f"model schema {forest.fingerprint} does not match data {frame.fingerprint}")
        return breiman_replace(frame, forest.fill_values)
    return frame


# ---------------------------------------------------------------------------
# steps shared by subcommands and the pipeline


def step_synth(cfg, out: Path) -> Dataset:
    spec = synth_spec(cfg)
    res = generate(spec)
    serialize(res.records, out / "records.csv")
    write_sidecar(res.sidecar, out / "sidecar.jsonl")
    write_json(out / "synth_spec.json", spec.to_dict())
    return Dataset(tuple(res.records), [])


def step_preprocess(cfg, ds: Dataset, out: Path) -> Dataset:
    clean, report = preprocess(ds, preprocess_config(cfg))
    serialize(clean.records, out / "records_clean.csv")
    (out / "preprocess_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return clean


def step_label(cfg, ds: Dataset, out: Path) -> ModelFrame:
    overrides = read_overrides(cfg["overrides"]) if cfg.get("overrides") else []
    config = par_config(cfg)
    report, timelines = label(ds, rule_tables(cfg), config, overrides)
    (out / "label_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "label_summary.csv").write_text(report.summary_csv(), encoding="utf-8")
    for e in report.errors:
        log.warning(e)
    outcomes = outcomes_from_labels(timelines, report, config.window_days)
    if not outcomes:
        raise RuntimeError("no eligible rows to build a model frame from")
    frame = build_frame(ds.records, outcomes, schema_of(cfg))
    frame = breiman_replace(frame)
    write_json(out / "frame.json", frame_to_json(frame))
    return frame


def step_train(cfg, frame: ModelFrame, out: Path) -> SurvivalForest:
    forest = train(frame, forest_config(cfg), n_jobs=int(cfg["n_jobs"]))
    if cfg.get("importance"):
        forest.importance = [r.to_dict() for r in variable_importance(forest, frame)]
    forest.save(out / "model.json")
    return forest


def _scores(cfg, forest, frame):
    ev = cfg["evaluate"]
    if ev["oob"]:
        votes = oob_predict(forest, frame, ev["pooling"])
        prob = oob_probability(forest, frame) if ev["score"] == "probability" else None
    else:
        votes = predict(forest, frame, ev["pooling"], with_probability=ev["score"] == "probability")
        prob = votes.probability
    return votes, prob


def step_evaluate(cfg, forest, frame, out: Path) -> dict:
    frame = model_frame(forest, frame)
    votes, _ = _scores(cfg, forest, frame)
    ok = ~np.isnan(votes.vote_fraction)
    y = frame.labels[ok]
    s = votes.vote_fraction[ok]
    counts = ConfusionCounts.from_predictions(votes.predicted[ok] == 1, y)
    metrics = classification_metrics(counts, s, y)
    try:
        c = auroc(s, y)
        pts = roc_curve(s, y)
    except UndefinedMetricError:
        c, pts = None, [(0.0, 0.0), (1.0, 1.0)]
    report = {
        "oob": bool(cfg["evaluate"]["oob"]),
        "n_scored": int(ok.sum()),
        "n_unscored": int((~ok).sum()),
        "auroc": c,
        "confusion": {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn},
        "metrics": {k: _clean(v) for k, v in metrics.items()},
        "oob_error": oob_error(forest, frame, cfg["evaluate"]["pooling"]).to_dict() if cfg["evaluate"]["oob"] else None,
        "master_seed": forest.config.master_seed,
    }
    write_json(out / "metrics.json", report)
    (out / "roc.csv").write_text(roc_csv(pts), encoding="utf-8")
    return report


def step_calibrate(cfg, forest, frame, out: Path) -> list:
    frame = model_frame(forest, frame)
    votes, prob = _scores(cfg, forest, frame)
    score = prob if prob is not None else votes.vote_fraction
    ok = ~np.isnan(score)
    ev = cfg["evaluate"]
    rows = calibration_table(score[ok], frame.labels[ok], ev["n_bins"], ev["binning"], ev.get("edges"))
    write_json(out / "calibration.json", {
        "score": ev["score"], "binning": ev["binning"], "rows": [
            {**r.to_dict(), "lower": _clean(r.lower), "upper": _clean(r.upper)} for r in rows],
    })
    (out / "calibration.csv").write_text(calibration_csv(rows), encoding="utf-8")
    return rows


def step_importance(cfg, forest, frame, out: Path) -> list:
    frame = model_frame(forest, frame)
    rows = variable_importance(forest, frame)
    data = [{k: _clean(v) if k != "variable" else v for k, v in r.to_dict().items()} for r in rows]
    write_json(out / "importance.json", {"master_seed": forest.config.master_seed, "rows": data})
    with (out / "importance.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "raw_score", "z_score", "significance"])
        for r in rows:
            w.writerow([r.variable, f"{r.raw_score:.6f}", f"{r.z_score:.6f}", f"{r.significance:.6g}"])
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    out = outdir(args.out)
    step_synth(cfg, out)
    write_resolved(out, "synth", cfg)


def cmd_preprocess(args, cfg):
    out = outdir(args.out)
    step_preprocess(cfg, read_records(args.data), out)
    write_resolved(out, "preprocess", cfg)


def cmd_label(args, cfg):
    out = outdir(args.out)
    if args.rules:
        cfg["rules_dir"] = args.rules
    if args.overrides:
        cfg["overrides"] = args.overrides
    ds = read_records(args.data)
    if ds.rejects:
        write_rejects(ds.rejects, out / "rejects.jsonl")
    step_label(cfg, ds, out)
    write_resolved(out, "label", cfg)


def cmd_fit(args, cfg):
    out = outdir(args.out)
    frame = read_frame(args.frame)
    obs = ObservationSet(frame.times, frame.events)
    ph, diag = fit_em(obs, args.m, args.r, EmConfig(max_iterations=args.max_iterations))
    write_json(out / "ph_fit.json", {"model": ph.to_dict(), "mean": mean(ph), "diagnostics": diag.to_dict()})
    write_resolved(out, "fit", {**cfg, "fit": {"m": args.m, "r": args.r, "max_iterations": args.max_iterations}})


def cmd_train(args, cfg):
    out = outdir(args.out)
    step_train(cfg, read_frame(args.frame), out)
    write_resolved(out, "train", cfg)


def cmd_predict(args, cfg):
    out = outdir(args.out)
    forest = read_model(args.model)
    frame = model_frame(forest, read_frame(args.frame))
    p = predict(forest, frame, cfg["evaluate"]["pooling"], with_probability=True)
    with (out / "scores.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "patient_id", "vote_fraction", "predicted", "probability"])
        for i in range(frame.n):
            w.writerow([p.record_ids[i], p.patient_ids[i], f"{p.vote_fraction[i]:.6f}", int(p.predicted[i]),
                        f"{p.probability[i]:.6f}"])
    write_resolved(out, "predict", cfg)


def cmd_evaluate(args, cfg):
    out = outdir(args.out)
    if args.in_sample:
        cfg["evaluate"]["oob"] = False
    rep = step_evaluate(cfg, read_model(args.model), read_frame(args.frame), out)
    print(f"AUROC {rep['auroc']}")
    write_resolved(out, "evaluate", cfg)


def cmd_calibrate(args, cfg):
    out = outdir(args.out)
    if args.in_sample:
        cfg["evaluate"]["oob"] = False
    step_calibrate(cfg, read_model(args.model), read_frame(args.frame), out)
    write_resolved(out, "calibrate", cfg)


def cmd_importance(args, cfg):
    out = outdir(args.out)
    step_importance(cfg, read_model(args.model), read_frame(args.frame), out)
    write_resolved(out, "importance", cfg)


def cmd_validate(args, cfg):
    out = outdir(args.out)
    frame = read_frame(args.frame)
    base = forest_config(cfg)
    jobs = int(cfg["n_jobs"])

    def trainer(tr, seed):
        f = train(tr, ForestConfig.from_dict({**base.to_dict(), "master_seed": seed}), n_jobs=jobs)
        return lambda fr: predict(f, fr).vote_fraction

    v = cfg["validate"]
    res = split_sample_validation(frame, trainer, int(v["n_repeats"]), float(v["split"]), int(cfg["master_seed"]))
    write_json(out / "validation.json", res)
    print(f"train c {res['train_c']:.3f}  test c {res['test_c']:.3f}  optimism {res['optimism']:.3f}")
    write_resolved(out, "validate", cfg)


def cmd_run(args, cfg):
    """synth (or --data) -> preprocess -> label -> train -> evaluate -> calibrate -> importance"""
    out = outdir(args.out)
    if args.data:
        ds = read_records(args.data)
    else:
        ds = step_synth(cfg, out)
    ds = step_preprocess(cfg, ds, out)
    frame = step_label(cfg, ds, out)
    forest = step_train(cfg, frame, out)
    rep = step_evaluate(cfg, forest, frame, out)
    step_calibrate(cfg, forest, frame, out)
    if cfg.get("importance"):
        step_importance(cfg, forest, frame, out)
    write_resolved(out, "run", cfg)
    print(f"AUROC {rep['auroc']}")


def cmd_docs(args, cfg):
    out = outdir(args.out)
    (out / "cli.md").write_text(cli_reference(), encoding="utf-8")
    sdir = outdir(out / "schemas")
    for name in schema_names():
        (sdir / f"{name}.json").write_text(json.dumps(load_schema(name), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# report schemas


def schema_names() -> list:
    base = resources.files("readmit") / "data" / "schemas"
    return sorted(e.name[:-5] for e in base.iterdir() if e.name.endswith(".json"))


def load_schema(name: str) -> dict:
    return json.loads((resources.files("readmit") / "data" / "schemas" / f"{name}.json").read_text("utf-8"))


# ---------------------------------------------------------------------------
# parser


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. forest.n_trees=50 (repeatable)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--n-jobs", type=int, dest="n_jobs", help="worker processes for training")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="readmit", description="Readmission labeling and phase-type survival forests")
    ap.add_argument("--version", action="version", version=f"readmit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", aliases=["generate"], help="generate a synthetic cohort")
    p.add_argument("--spec", help="cohort spec JSON (otherwise the config's synth section)")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="fixes, outlier removal, imputation, distance levels")
    p.add_argument("--data", required=True, help="records file (.csv or .jsonl)")
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("label", help="PAR labeling; writes the label report and a model frame")
    p.add_argument("--data", required=True, help="records file (.csv or .jsonl)")
    p.add_argument("--rules", help="rule table directory (default: shipped synthetic tables)")
    p.add_argument("--overrides", help="reviewer override file (JSON lines)")
    _common(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("fit", help="fit one Coxian phase-type model to a frame's outcomes")
    p.add_argument("--frame", required=True)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--max-iterations", type=int, default=500, dest="max_iterations")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="grow a phase-type survival forest")
    p.add_argument("--frame", required=True)
    _common(p)
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (
        ("predict", cmd_predict, "score a frame"),
        ("evaluate", cmd_evaluate, "classification metrics, AUROC and ROC points"),
        ("calibrate", cmd_calibrate, "risk-bin calibration table"),
        ("importance", cmd_importance, "permutation variable importance"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--model", required=True)
        p.add_argument("--frame", required=True)
        if name in ("evaluate", "calibrate"):
            p.add_argument("--in-sample", action="store_true", dest="in_sample",
                           help="score with all trees instead of out-of-bag trees")
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("validate", help="repeated split-half validation with optimism correction")
    p.add_argument("--frame", required=True)
    _common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", aliases=["pipeline"], help="synth -> preprocess -> label -> train -> evaluate -> calibrate")
    p.add_argument("--data", help="use this records file instead of generating one")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("docs", help="write the CLI reference and report schemas")
    _common(p, config=False)
    p.set_defaults(func=cmd_docs)
    return ap


def cli_reference() -> str:
    ap = build_parser()
    lines = ["# readmit command reference", "", "Generated by `readmit docs`.", "",
             "Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 schema mismatch.", "",
             "```", ap.format_help().rstrip(), "```", ""]
    sub = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
    seen = set()
    for name, p in sub.choices.items():
        if id(p) in seen:
            continue
        seen.add(id(p))
        lines += [f"## {name}", "", "```", p.format_help().rstrip(), "```", ""]
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args) if args.command != "docs" else {}
        args.func(args, cfg)
    except SchemaMismatchError as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the exit-code contract
        if args.verbose:
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
