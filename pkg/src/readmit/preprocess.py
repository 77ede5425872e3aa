"""Record cleaning before labeling and modeling.

Order: consistency fixes, outlier removal, hot-deck imputation, distance
discretization.  Every change is written to a PreprocessReport, and
:func:`apply_report` replays a report on the raw data.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .frame import ModelFrame
from .records import CovariateVector, Dataset

IMPUTABLE = ("income", "can_score", "charlson_index", "distance_miles")
LOF_FEATURES = ("age", "length_of_stay", "past_year_hospitalizations", "enrollment_priority", "charge")
NEAR_LIMIT = 25.0
FAR_LIMIT = 50.0
_COVARIATE_FIELDS = frozenset(CovariateVector.__dataclass_fields__)


class PreprocessError(ValueError):
    pass


class FixRuleConflict(PreprocessError):
    """Two fix rules can match the same record and disagree."""


# ---------------------------------------------------------------------------
# field access


def get_field(rec, name):
    if name in _COVARIATE_FIELDS:
        return getattr(rec.covariates, name)
    return getattr(rec, name)


def set_fields(rec, values: dict):
    cov = {k: v for k, v in values.items() if k in _COVARIATE_FIELDS}
    top = {k: v for k, v in values.items() if k not in _COVARIATE_FIELDS}
    if cov:
        top["covariates"] = replace(rec.covariates, **cov)
    return replace(rec, **top) if top else rec


# ---------------------------------------------------------------------------
# (c) consistency fixes


@dataclass(frozen=True)
class FixRule:
    name: str
    when: dict
    set: dict

    def matches(self, rec) -> bool:
        return all(get_field(rec, k) == v for k, v in self.when.items())

    def to_dict(self):
        return {"name": self.name, "when": dict(self.when), "set": dict(self.set)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], dict(d["when"]), dict(d["set"]))


DEFAULT_FIX_RULES = (FixRule("pow_implies_veteran", {"pow": True, "veteran": False}, {"veteran": True}),)


def validate_fix_rules(rules) -> None:
    """Reject rule sets that could disagree or never settle."""
    known = _COVARIATE_FIELDS | {"charge", "enrolled", "discharge_status", "ward_type", "facility", "cohort"}
    for r in rules:
        for k in list(r.when) + list(r.set):
            if k not in known:
                raise PreprocessError(f"fix rule {r.name!r}: unknown field {k!r}")
        if not any(k in r.when and r.when[k] != v for k, v in r.set.items()):
            raise FixRuleConflict(f"fix rule {r.name!r}: its correction does not clear its own condition")
    for a in rules:
        for b in rules:
            if a is b:
                continue
            # b can fire on a record that matched a (before or after a's correction)
            for state in (dict(a.when), {**a.when, **a.set}):
                if not all(state[k] == v for k, v in b.when.items() if k in state):
                    continue
                for k, v in a.set.items():
                    if k in b.set and b.set[k] != v:
                        raise FixRuleConflict(f"fix rules {a.name!r} and {b.name!r} set {k!r} to different values")


def apply_consistency_fixes(records, rules=DEFAULT_FIX_RULES):
    rules = tuple(rules)
    validate_fix_rules(rules)
    out, applied = [], []
    for rec in records:
        for r in rules:
            if r.matches(rec):
                rec = set_fields(rec, r.set)
                applied.append((rec.record_id, r.name))
        out.append(rec)
    return out, applied


# ---------------------------------------------------------------------------
# (b) local outlier factor


def _feature_matrix(records, features) -> np.ndarray:
    X = np.array([[_num(get_field(r, f)) for f in features] for r in records], dtype=float)
    return X.reshape(len(records), len(features))


def _num(v) -> float:
    if v is None:
        return math.nan
    return float(v)


def standardize(X: np.ndarray) -> np.ndarray:
    """Z-scores per column; missing entries sit at the column mean."""
    mu = np.nanmean(X, axis=0) if X.size else np.zeros(X.shape[1])
    sd = np.nanstd(X, axis=0) if X.size else np.ones(X.shape[1])
    mu = np.where(np.isnan(mu), 0.0, mu)
    sd = np.where(~(sd > 0), 1.0, sd)
    Z = (X - mu) / sd
    return np.where(np.isnan(Z), 0.0, Z)


def lof_scores(Z: np.ndarray, k_neighbors: int = 20) -> np.ndarray:
    """Local outlier factor of every row of ``Z``."""
    from sklearn.neighbors import LocalOutlierFactor

    n = Z.shape[0]
    if n < k_neighbors + 1:
        raise PreprocessError(f"LOF needs at least k_neighbors + 1 = {k_neighbors + 1} records, got {n}")
    lof = LocalOutlierFactor(n_neighbors=k_neighbors, metric="euclidean", algorithm="brute")
    with warnings.catch_warnings():
        # duplicate points trigger a benign sklearn warning
        warnings.simplefilter("ignore")
        lof.fit(Z)
    return -lof.negative_outlier_factor_


def lof_outliers(records, k_neighbors: int = 20, threshold: float = 1.5, features=LOF_FEATURES,
                 max_rounds: int = 50):
    """Flag records with LOF above ``threshold``.

    Scoring is repeated on the survivors until no record exceeds the
    threshold, so the survivors are outlier-free with respect to each other.
    Returns a list of (record_id, score).
    """
    records = list(records)
    flagged = []
    for _ in range(max_rounds):
        if math.isinf(threshold):
            break
        Z = standardize(_feature_matrix(records, features))
        s = lof_scores(Z, k_neighbors)
        hit = s > threshold
        if not hit.any():
            break
        flagged += [(records[i].record_id, float(s[i])) for i in np.flatnonzero(hit)]
        records = [r for r, h in zip(records, hit) if not h]
        if len(records) < k_neighbors + 1:
            break
    else:
        warnings.warn("outlier removal did not settle within max_rounds", stacklevel=2)
    return flagged


# ---------------------------------------------------------------------------
# (a) hot-deck imputation


def hot_deck_impute(records, fields=IMPUTABLE, rng=None, seed: int = 0):
    """Fill missing values from a random donor in the same cohort x sex cell.

    Returns (records, entries) where each entry is
    (record_id, field, donor_id, value, fallback).  Only observed values are
    donated.  An empty cell falls back to the global pool and is flagged.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    records = list(records)
    entries = []
    for f in fields:
        donors = defaultdict(list)
        pool = []
        for r in records:
            if get_field(r, f) is not None:
                donors[(r.cohort, r.covariates.sex)].append(r)
                pool.append(r)
        updates = {}
        for i, r in enumerate(records):
            if get_field(r, f) is not None:
                continue
            cell = donors.get((r.cohort, r.covariates.sex), [])
            fallback = not cell
            if fallback:
                cell = pool
            if not cell:
                raise PreprocessError(f"no donors for field {f!r}: the field is missing everywhere")
            d = cell[int(rng.integers(len(cell)))]
            value = get_field(d, f)
            updates[i] = set_fields(r, {f: value})
            entries.append((r.record_id, f, d.record_id, value, fallback))
        for i, r in updates.items():
            records[i] = r
    return records, entries


# ---------------------------------------------------------------------------
# (d) distance levels


def distance_level(miles: float, near: float = NEAR_LIMIT, far: float = FAR_LIMIT) -> str:
    """[0, near) near, [near, far] middle, (far, inf) far."""
    if miles < near:
        return "near"
    if miles <= far:
        return "middle"
    return "far"


def kmeans_thresholds(values, seed: int = 0) -> tuple:
    """Boundaries between three 1-D k-means clusters (midpoints of centers)."""
    from sklearn.cluster import KMeans

    v = np.asarray(values, dtype=float).reshape(-1, 1)
    if len(np.unique(v)) < 3:
        raise PreprocessError("k-means discretization needs at least three distinct distances")
    km = KMeans(n_clusters=3, n_init=10, random_state=seed).fit(v)
    c = np.sort(km.cluster_centers_.ravel())
    return float((c[0] + c[1]) / 2), float((c[1] + c[2]) / 2)


def discretize_distance(records, mode: str = "fixed", seed: int = 0):
    """Returns (records, thresholds, levels)."""
    records = list(records)
    if mode == "fixed":
        th = (NEAR_LIMIT, FAR_LIMIT)
    elif mode == "kmeans":
        th = kmeans_thresholds([r.covariates.distance_miles for r in records
                                if r.covariates.distance_miles is not None], seed)
    else:
        raise PreprocessError(f"unknown discretization mode {mode!r}")
    levels = {}
    out = []
    for r in records:
        d = r.covariates.distance_miles
        if d is None:
            out.append(r)
            continue
        lev = distance_level(d, *th)
        levels[r.record_id] = lev
        out.append(set_fields(r, {"distance_level": lev}))
    return out, th, levels


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PreprocessConfig:
    fix_rules: tuple = DEFAULT_FIX_RULES
    lof_k: int = 20
    lof_threshold: float = 1.5
    lof_features: tuple = LOF_FEATURES
    impute_fields: tuple = IMPUTABLE
    discretization: str = "fixed"
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["fix_rules"] = [r.to_dict() for r in self.fix_rules]
        d["lof_features"] = list(self.lof_features)
        d["impute_fields"] = list(self.impute_fields)
        d["lof_threshold"] = None if math.isinf(self.lof_threshold) else self.lof_threshold
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreprocessError(f"unknown preprocess config field(s) {sorted(unknown)}")
        if "fix_rules" in d:
            d["fix_rules"] = tuple(FixRule.from_dict(r) for r in d["fix_rules"])
        if d.get("lof_threshold", 1.5) is None:
            d["lof_threshold"] = math.inf
        for k in ("lof_features", "impute_fields"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class PreprocessReport:
    imputed: list = field(default_factory=list)  # (record_id, field, donor_id, value, fallback)
    outliers_removed: list = field(default_factory=list)  # (record_id, score)
    fixes_applied: list = field(default_factory=list)  # (record_id, rule)
    discretization: dict = field(default_factory=dict)
    fix_rules: list = field(default_factory=list)

    def to_dict(self):
        return {
            "imputed": [{"record_id": a, "field": f, "donor_id": d, "value": v, "fallback": fb}
                        for a, f, d, v, fb in self.imputed],
            "outliers_removed": [{"record_id": a, "lof": s} for a, s in self.outliers_removed],
            "fixes_applied": [{"record_id": a, "rule": r} for a, r in self.fixes_applied],
            "discretization": self.discretization,
            "fix_rules": self.fix_rules,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            imputed=[(e["record_id"], e["field"], e["donor_id"], e["value"], e["fallback"]) for e in d["imputed"]],
            outliers_removed=[(e["record_id"], e["lof"]) for e in d["outliers_removed"]],
            fixes_applied=[(e["record_id"], e["rule"]) for e in d["fixes_applied"]],
            discretization=dict(d["discretization"]),
            fix_rules=list(d.get("fix_rules", [])),
        )


def preprocess(dataset, config: PreprocessConfig | None = None):
    """Run fixes, outlier removal, imputation and discretization."""
    config = config or PreprocessConfig()
    records = list(dataset.records if isinstance(dataset, Dataset) else dataset)
    report = PreprocessReport(fix_rules=[r.to_dict() for r in config.fix_rules])
    records, report.fixes_applied = apply_consistency_fixes(records, config.fix_rules)
    report.outliers_removed = lof_outliers(records, config.lof_k, config.lof_threshold, config.lof_features)
    gone = {rid for rid, _ in report.outliers_removed}
    records = [r for r in records if r.record_id not in gone]
    records, report.imputed = hot_deck_impute(records, config.impute_fields, seed=config.seed)
    records, th, levels = discretize_distance(records, config.discretization, config.seed)
    report.discretization = {"mode": config.discretization, "thresholds": list(th), "levels": levels}
    rejects = dataset.rejects if isinstance(dataset, Dataset) else []
    return Dataset(tuple(records), list(rejects)), report


def apply_report(dataset, report: PreprocessReport) -> Dataset:
    """Replay a report on raw records."""
    rules = {d["name"]: FixRule.from_dict(d) for d in report.fix_rules}
    recs = {r.record_id: r for r in (dataset.records if isinstance(dataset, Dataset) else dataset)}
    order = list(recs)
    for rid, rule in report.fixes_applied:
        recs[rid] = set_fields(recs[rid], rules[rule].set)
    for rid, _ in report.outliers_removed:
        recs.pop(rid, None)
    for rid, f, _donor, value, _fb in report.imputed:
        recs[rid] = set_fields(recs[rid], {f: value})
    for rid, lev in report.discretization.get("levels", {}).items():
        recs[rid] = set_fields(recs[rid], {"distance_level": lev})
    return Dataset(tuple(recs[r] for r in order if r in recs), [])


# ---------------------------------------------------------------------------
# model-time fill


def breiman_fill_values(X: np.ndarray, schema) -> dict:
    """Median for numeric columns, most frequent level for categoricals."""
    fills = {}
    for j, spec in enumerate(schema):
        col = X[:, j]
        obs = col[~np.isnan(col)]
        if obs.size == 0:
            raise PreprocessError(f"field {spec.name!r} is missing in every row")
        if spec.kind == "continuous":
            fills[spec.name] = float(np.median(obs))
        else:
            vals, counts = np.unique(obs, return_counts=True)
            # np.unique sorts, so ties go to the lowest level index
            fills[spec.name] = float(vals[np.argmax(counts)])
    return fills


def breiman_replace(frame: ModelFrame, fill_values: dict | None = None) -> ModelFrame:
    """Fill NaNs of a frame; values learned here unless supplied."""
    fills = fill_values if fill_values is not None else breiman_fill_values(frame.X, frame.schema)
    X = frame.X.copy()
    for j, spec in enumerate(frame.schema):
        miss = np.isnan(X[:, j])
        if miss.any():
            if spec.name not in fills:
                raise PreprocessError(f"no fill value for field {spec.name!r}")
            X[miss, j] = fills[spec.name]
    return ModelFrame(X, frame.times, frame.events, frame.patient_ids, frame.record_ids, frame.schema,
                      {k: fills[k] for k in sorted(fills)})
