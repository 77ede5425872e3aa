"""Synthetic cohorts with covariate-driven phase-type readmission times.

Every generated record is assigned a regime by the spec's ``regime_map``;
the regime's Coxian model gives the time from discharge to the next
admission.  A readmission record is emitted when that time falls within the
horizon, otherwise the record is censored and the patient's next episode (if
any) starts well after the horizon.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .phase_type import CoxianPH, sample_sojourn, survival
from .records import COMORBIDITIES, FACILITIES, AdmissionRecord, CovariateVector

STUDY_COHORTS = ("HF", "AMI", "PN", "COPD")

COHORT_DX = {
    "HF": ("428.0", "428.22", "428.32"),
    "AMI": ("410.71", "410.11", "410.41"),
    "PN": ("486", "481", "482.9"),
    "COPD": ("491.21", "496", "491.22"),
}
COHORT_DRG = {"HF": "291", "AMI": "280", "PN": "193", "COPD": "190"}

# Marginals loosely shaped like the study population's baseline tables.
DEFAULT_COVARIATES = {
    "cohort": {"type": "categorical", "probs": {"HF": 0.30, "AMI": 0.25, "PN": 0.23, "COPD": 0.22}},
    "facility": {"type": "categorical", "probs": {f: 0.25 for f in FACILITIES}},
    "age": {"type": "normal", "mean": 69.0, "sd": 5.5, "min": 40, "max": 99},
    "sex": {"type": "categorical", "probs": {"M": 0.93, "F": 0.07}},
    "race": {"type": "categorical", "probs": {"Black": 0.66, "White": 0.31, "Other": 0.03}},
    "marital_status": {
        "type": "categorical",
        "probs": {"married": 0.56, "never_married": 0.23, "previously_married": 0.21},
    },
    "insurance": {"type": "categorical", "probs": {"Medicare": 0.51, "Medicaid": 0.17, "Private": 0.08, "None": 0.24}},
    "income": {"type": "lognormal", "mu": 10.2, "sigma": 0.5},
    "length_of_stay": {"type": "lognormal", "mu": 1.4, "sigma": 0.8},
    "admission_source": {
        "type": "categorical",
        "probs": {"home": 0.54, "outpatient": 0.29, "transfer": 0.015, "NHCU": 0.045, "domiciliary": 0.01, "other": 0.10},
    },
    "enrollment_priority": {
        "type": "categorical",
        "probs": {"1": 0.087, "2": 0.11, "3": 0.20, "4": 0.12, "5": 0.24, "6": 0.10, "7": 0.063, "8": 0.08},
    },
    "distance_level": {"type": "categorical", "probs": {"near": 0.62, "middle": 0.36, "far": 0.02}},
    "pow": {"type": "bernoulli", "p": 0.012},
    "radiation": {"type": "bernoulli", "p": 0.01},
    "agent_orange": {"type": "bernoulli", "p": 0.045},
    "can_score": {"type": "normal", "mean": 67.0, "sd": 4.5, "min": 0, "max": 99},
    "past_year_hospitalizations": {"type": "categorical", "probs": {"0": 0.44, "1": 0.2, "2": 0.15, "3": 0.1, "4": 0.06, "6": 0.05}},
    "charlson_index": {"type": "gamma", "shape": 2.0, "scale": 1.5},
    "charge": {"type": "lognormal", "mu": 9.9, "sigma": 0.7},
    "cm_cad": {"type": "bernoulli", "p": 0.30},
    "cm_heart_failure": {"type": "bernoulli", "p": 0.28},
    "cm_vascular_wc": {"type": "bernoulli", "p": 0.20},
    "cm_cardiorespiratory": {"type": "bernoulli", "p": 0.11},
    "cm_pneumonia": {"type": "bernoulli", "p": 0.06},
    "cm_atrial_fibrillation": {"type": "bernoulli", "p": 0.27},
    "cm_anemia": {"type": "bernoulli", "p": 0.20},
    "cm_diabetes": {"type": "bernoulli", "p": 0.22},
    "cm_copd": {"type": "bernoulli", "p": 0.15},
    "cm_chronic_bronchitis": {"type": "bernoulli", "p": 0.05},
    "cm_malignant_neoplasm": {"type": "bernoulli", "p": 0.05},
    "cm_mental_disorder": {"type": "bernoulli", "p": 0.11},
    "cm_substance_abuse": {"type": "bernoulli", "p": 0.09},
}

# drawn once per patient; everything else is redrawn for every record
PATIENT_LEVEL = (
    "cohort", "facility", "sex", "race", "marital_status", "insurance", "income",
    "enrollment_priority", "distance_level", "pow", "radiation", "agent_orange",
)
MISSABLE = ("income", "can_score", "charlson_index", "distance_miles")
DISTANCE_RANGES = {"near": (0.0, 25.0), "middle": (25.0, 50.0), "far": (50.0, 300.0)}


class SpecError(ValueError):
    """Invalid cohort specification."""


@dataclass
class CohortSpec:
    n_patients: int
    regimes: dict  # name -> CoxianPH
    regime_map: dict  # {"rules": [{"when": {...}, "regime": name}], "default": name}
    mean_admissions: float = 1.0
    max_records_per_patient: int = 20
    horizon: float = 30.0
    seed: int = 0
    start: str = "2011-10-01T00:00"
    span_days: float = 365.0
    covariates: dict = field(default_factory=dict)
    missing_rates: dict = field(default_factory=dict)
    discharge_status_probs: dict = field(default_factory=lambda: {"home": 1.0})

    def __post_init__(self):
        if self.n_patients < 1:
            raise SpecError("n_patients must be >= 1")
        if not self.horizon > 0:
            raise SpecError("horizon must be > 0")
        if self.mean_admissions < 1:
            raise SpecError("mean_admissions must be >= 1")
        if self.max_records_per_patient < 1:
            raise SpecError("max_records_per_patient must be >= 1")
        if not self.regimes:
            raise SpecError("at least one regime is required")
        for name, ph in list(self.regimes.items()):
            if isinstance(ph, dict):
                self.regimes[name] = _ph_from_spec(ph)
        if "default" not in self.regime_map or self.regime_map["default"] not in self.regimes:
            raise SpecError("regime_map needs a 'default' naming a defined regime (the map must be total)")
        for rule in self.regime_map.get("rules", []):
            if rule.get("regime") not in self.regimes:
                raise SpecError(f"rule refers to undefined regime {rule.get('regime')!r}")
            if not isinstance(rule.get("when"), dict) or not rule["when"]:
                raise SpecError("each rule needs a non-empty 'when' mapping")
            for key in rule["when"]:
                if key not in _MATCHABLE:
                    raise SpecError(f"regime rule on unknown covariate {key!r}")
        for key in self.covariates:
            if key not in DEFAULT_COVARIATES:
                raise SpecError(f"unknown covariate generator {key!r}")
        for key, rate in self.missing_rates.items():
            if key not in MISSABLE:
                raise SpecError(f"{key!r} cannot be missing")
            if not 0 <= rate < 1:
                raise SpecError(f"missing rate for {key} must be in [0, 1)")
        try:
            datetime.fromisoformat(self.start)
        except ValueError as exc:
            raise SpecError(f"bad start timestamp {self.start!r}") from exc
        total = sum(self.discharge_status_probs.values())
        if not math.isclose(total, 1.0, rel_tol=1e-9):
            raise SpecError("discharge_status_probs must sum to 1")

    def generators(self) -> dict:
        gens = copy.deepcopy(DEFAULT_COVARIATES)
        for k, v in self.covariates.items():
            gens[k] = {**gens[k], **v}
        return gens

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "regimes": {k: _ph_to_spec(v) for k, v in self.regimes.items()},
            "regime_map": self.regime_map,
            "mean_admissions": self.mean_admissions,
            "max_records_per_patient": self.max_records_per_patient,
            "horizon": self.horizon,
            "seed": self.seed,
            "start": self.start,
            "span_days": self.span_days,
            "covariates": self.covariates,
            "missing_rates": self.missing_rates,
            "discharge_status_probs": self.discharge_status_probs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CohortSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec field(s) {sorted(unknown)}")
        missing = {"n_patients", "regimes", "regime_map"} - set(d)
        if missing:
            raise SpecError(f"missing spec field(s) {sorted(missing)}")
        try:
            return cls(**copy.deepcopy(d))
        except (TypeError, KeyError) as exc:
            raise SpecError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> CohortSpec:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_MATCHABLE = set(DEFAULT_COVARIATES) | {"sequence", "distance_miles"}


def _ph_from_spec(d: dict) -> CoxianPH:
    try:
        return CoxianPH(
            m=int(d["m"]),
            r=int(d["r"]),
            lambdas=tuple(float(x) for x in d.get("lambdas", ())),
            lambda_ss=float(d["lambda_ss"]),
            lambda_ls=None if d.get("lambda_ls") is None else float(d["lambda_ls"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SpecError(f"bad regime model {d}: {exc}") from exc


def _ph_to_spec(ph: CoxianPH) -> dict:
    return {"m": ph.m, "r": ph.r, "lambdas": list(ph.lambdas), "lambda_ss": ph.lambda_ss, "lambda_ls": ph.lambda_ls}


def _draw(gen: dict, rng: np.random.Generator):
    kind = gen["type"]
    if kind == "categorical":
        levels = list(gen["probs"])
        p = np.array([gen["probs"][k] for k in levels], dtype=float)
        return levels[int(rng.choice(len(levels), p=p / p.sum()))]
    if kind == "bernoulli":
        return bool(rng.random() < gen["p"])
    if kind == "normal":
        x = rng.normal(gen["mean"], gen["sd"])
        return float(np.clip(x, gen.get("min", -np.inf), gen.get("max", np.inf)))
    if kind == "lognormal":
        return float(rng.lognormal(gen["mu"], gen["sigma"]))
    if kind == "gamma":
        return float(rng.gamma(gen["shape"], gen["scale"]))
    if kind == "uniform":
        return float(rng.uniform(gen["low"], gen["high"]))
    raise SpecError(f"unknown generator type {kind!r}")


def _matches(when: dict, values: dict) -> bool:
    for key, want in when.items():
        have = values.get(key)
        if isinstance(want, dict):
            if have is None:
                return False
            if "min" in want and have < want["min"]:
                return False
            if "max" in want and have > want["max"]:
                return False
        elif have != want:
            return False
    return True


def assign_regime(spec: CohortSpec, values: dict) -> str:
    for rule in spec.regime_map.get("rules", []):
        if _matches(rule["when"], values):
            return rule["regime"]
    return spec.regime_map["default"]


def _ceil_minutes(days: float) -> timedelta:
    return timedelta(minutes=max(1, math.ceil(days * 1440.0 - 1e-9)))


def _patient(spec: CohortSpec, gens: dict, i: int, rng: np.random.Generator, start: datetime):
    pid = f"P{i:06d}"
    static = {k: _draw(gens[k], rng) for k in PATIENT_LEVEL}
    static["enrollment_priority"] = int(static["enrollment_priority"])
    lo, hi = DISTANCE_RANGES[static["distance_level"]]
    static["distance_miles"] = round(float(rng.uniform(lo, hi)), 2)
    base_age = int(round(_draw(gens["age"], rng)))
    n_episodes = 1 + int(rng.poisson(spec.mean_admissions - 1.0))
    statuses = list(spec.discharge_status_probs)
    sp = np.array([spec.discharge_status_probs[s] for s in statuses], dtype=float)
    admit = start + timedelta(minutes=int(rng.integers(0, int(spec.span_days * 1440))))
    records, truth = [], []
    sequence = 0
    k = 0
    for _ in range(n_episodes):
        readmit = False
        while True:
            values = dict(static)
            for name in DEFAULT_COVARIATES:
                if name not in PATIENT_LEVEL and name not in ("age",):
                    values[name] = _draw(gens[name], rng)
            values["age"] = base_age + int((admit - start).days // 365)
            values["sequence"] = sequence
            values["can_score"] = int(round(values["can_score"]))
            values["past_year_hospitalizations"] = int(values["past_year_hospitalizations"])
            missing = {m for m in MISSABLE if rng.random() < spec.missing_rates.get(m, 0.0)}
            regime = assign_regime(spec, values)
            t = float(sample_sojourn(spec.regimes[regime], rng))
            los = max(values["length_of_stay"], 1.0 / 24.0)
            discharge = admit + timedelta(minutes=max(60, int(round(los * 1440))))
            status = statuses[int(rng.choice(len(statuses), p=sp / sp.sum()))]
            cohort = static["cohort"]
            dx = COHORT_DX[cohort][int(rng.integers(len(COHORT_DX[cohort])))]
            if readmit:
                dx = records[-1].principal_dx
            comorb = frozenset(c for c in COMORBIDITIES if values[f"cm_{c}"])
            cov = CovariateVector(
                age=int(values["age"]),
                sex=values["sex"],
                race=values["race"],
                marital_status=values["marital_status"],
                insurance=values["insurance"],
                income=None if "income" in missing else round(values["income"], 2),
                length_of_stay=(discharge - admit).total_seconds() / 86400.0,
                admission_source=values["admission_source"],
                enrollment_priority=values["enrollment_priority"],
                distance_miles=None if "distance_miles" in missing else values["distance_miles"],
                distance_level=None,
                agent_orange=values["agent_orange"],
                pow=values["pow"],
                radiation=values["radiation"],
                veteran=True,
                drg=COHORT_DRG[cohort],
                hcc_codes=(),
                can_score=None if "can_score" in missing else values["can_score"],
                past_year_hospitalizations=values["past_year_hospitalizations"],
                sequence=sequence,
                charlson_index=None if "charlson_index" in missing else round(values["charlson_index"], 2),
                comorbidities=comorb,
            )
            rid = f"R{i:06d}-{k:03d}"
            rec = AdmissionRecord(
                record_id=rid,
                patient_id=pid,
                facility=static["facility"],
                admit_time=admit,
                discharge_time=discharge,
                cohort=cohort,
                principal_dx=dx,
                discharge_status=status,
                charge=round(float(np.clip(values["charge"], 200.0, 4_000_000.0)), 2),
                covariates=cov,
            )
            records.append(rec)
            k += 1
            within = t <= spec.horizon
            at_cap = k >= spec.max_records_per_patient
            truth.append({
                "record_id": rid,
                "patient_id": pid,
                "regime": regime,
                "sampled_time": t,
                "censored": not within,
                "truncated": bool(within and at_cap),
                "next_record_id": None,
            })
            if at_cap:
                return records, truth
            if within:
                truth[-1]["next_record_id"] = f"R{i:06d}-{k:03d}"
                admit = discharge + _ceil_minutes(t)
                sequence += 1
                readmit = True
                continue
            # censored: next episode (if any) starts after the horizon
            gap = spec.horizon + 1.0 + float(rng.exponential(60.0))
            admit = discharge + _ceil_minutes(gap)
            break
    return records, truth


@dataclass
class SynthResult:
    records: tuple
    sidecar: list
    spec: CohortSpec

    def truth_by_id(self) -> dict:
        return {row["record_id"]: row for row in self.sidecar}


def generate(spec: CohortSpec) -> SynthResult:
    """Generate records plus a ground-truth sidecar (one entry per record)."""
    gens = spec.generators()
    start = datetime.fromisoformat(spec.start)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    records, sidecar = [], []
    for i, ss in enumerate(seeds):
        recs, truth = _patient(spec, gens, i, np.random.default_rng(ss), start)
        records.extend(recs)
        sidecar.extend(truth)
    return SynthResult(tuple(records), sidecar, spec)


def write_sidecar(sidecar, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in sidecar:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_sidecar(path) -> list:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def regime_readmission_probability(spec: CohortSpec) -> dict:
    """Analytic P(T <= horizon) of each regime."""
    return {k: 1.0 - float(survival(ph, spec.horizon)) for k, ph in spec.regimes.items()}


def two_regime_spec(n_patients=2000, seed=0, covariate="cm_diabetes", fast_mean=5.0, slow_mean=60.0,
                    fast_share=0.5, mean_admissions=1.0, max_records_per_patient=8) -> CohortSpec:
    """Fast and slow three-phase Erlang-like regimes keyed on one binary flag."""
    def erlang3(mean):
        rate = 3.0 / mean
        return {"m": 1, "r": 2, "lambdas": [rate, rate], "lambda_ss": 1e-9, "lambda_ls": rate}

    return CohortSpec(
        n_patients=n_patients,
        seed=seed,
        regimes={"fast": erlang3(fast_mean), "slow": erlang3(slow_mean)},
        regime_map={"rules": [{"when": {covariate: True}, "regime": "fast"}], "default": "slow"},
        mean_admissions=mean_admissions,
        max_records_per_patient=max_records_per_patient,
        covariates={covariate: {"p": fast_share}},
    )


def truth_frame(result: SynthResult, schema):
    """Model frame whose outcomes come straight from the sidecar.

    Times are the sampled times capped at the horizon; a row is complete
    when its sampled time fell within the horizon.
    """
    from .frame import build_frame

    horizon = result.spec.horizon
    outcomes = {}
    for row in result.sidecar:
        t = row["sampled_time"]
        outcomes[row["record_id"]] = (min(t, horizon), t <= horizon)
    return build_frame(result.records, outcomes, schema)
