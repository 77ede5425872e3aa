"""Model frames: numeric design matrices with survival outcomes.

A frame row is one record that can seed a readmission (an eligible
admission or a PAR).  Its outcome is the time to the next PAR tied to it
(complete) or the time it was followed without one (censored).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .records import (
    ADMISSION_SOURCES,
    COHORTS,
    COMORBIDITIES,
    DISTANCE_LEVELS,
    FACILITIES,
    INSURANCES,
    MARITAL_STATUSES,
    RACES,
    SEXES,
    AdmissionRecord,
)

MINUTE = 1.0 / 1440.0


class SchemaMismatchError(ValueError):
    """Model and data were built with different variable schemas."""


class UnknownEncodingError(ValueError):
    """A categorical value is not among the schema's levels."""


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str  # continuous | binary | categorical
    levels: tuple | None = None

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "levels": list(self.levels) if self.levels else None}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], tuple(d["levels"]) if d.get("levels") else None)


def _c(name):
    return VariableSpec(name, "continuous")


def _b(name):
    return VariableSpec(name, "binary")


def _k(name, levels):
    return VariableSpec(name, "categorical", tuple(levels))


DEFAULT_VARIABLES = (
    _c("age"),
    _k("sex", SEXES),
    _k("race", RACES),
    _k("marital_status", MARITAL_STATUSES),
    _k("insurance", INSURANCES),
    _c("income"),
    _c("length_of_stay"),
    _k("admission_source", ADMISSION_SOURCES),
    _c("enrollment_priority"),
    _k("distance_level", DISTANCE_LEVELS),
    _b("agent_orange"),
    _b("pow"),
    _b("radiation"),
    _b("veteran"),
    _c("can_score"),
    _c("past_year_hospitalizations"),
    _c("sequence"),
    _c("charlson_index"),
    _k("cohort", COHORTS),
    _k("facility", FACILITIES),
) + tuple(_b(f"cm_{c}") for c in COMORBIDITIES)

_BY_NAME = {v.name: v for v in DEFAULT_VARIABLES}
_BY_NAME["distance_miles"] = _c("distance_miles")


def variables_by_name(names) -> tuple:
    out = []
    for n in names:
        if n not in _BY_NAME:
            raise KeyError(f"unknown model variable {n!r}")
        out.append(_BY_NAME[n])
    return tuple(out)


def schema_fingerprint(schema) -> str:
    payload = json.dumps([v.to_dict() for v in schema], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def record_value(rec: AdmissionRecord, name: str):
    """Raw value of a model variable on a record (None when missing)."""
    if name in ("cohort", "facility"):
        return getattr(rec, name)
    if name.startswith("cm_"):
        return name[3:] in rec.covariates.comorbidities
    return getattr(rec.covariates, name)


def encode_value(spec: VariableSpec, value) -> float:
    if value is None:
        return math.nan
    if spec.kind == "continuous":
        return float(value)
    if spec.kind == "binary":
        return 1.0 if bool(value) else 0.0
    try:
        return float(spec.levels.index(value))
    except ValueError:
        raise UnknownEncodingError(f"{spec.name}: level {value!r} not in {spec.levels}") from None


@dataclass
class ModelFrame:
    X: np.ndarray
    times: np.ndarray
    events: np.ndarray
    patient_ids: np.ndarray
    record_ids: np.ndarray
    schema: tuple
    fill_values: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def labels(self) -> np.ndarray:
        return self.events.astype(int)

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.schema)

    def names(self) -> list:
        return [v.name for v in self.schema]

    def subset(self, mask) -> ModelFrame:
        return ModelFrame(
            self.X[mask],
            self.times[mask],
            self.events[mask],
            self.patient_ids[mask],
            self.record_ids[mask],
            self.schema,
            dict(self.fill_values),
        )

    def to_rows(self) -> list:
        rows = []
        for i in range(self.n):
            row = {"record_id": str(self.record_ids[i]), "patient_id": str(self.patient_ids[i]),
                   "time": float(self.times[i]), "event": int(self.events[i])}
            for j, v in enumerate(self.schema):
                x = float(self.X[i, j])
                row[v.name] = None if math.isnan(x) else x
            rows.append(row)
        return rows


def design_matrix(records, schema) -> np.ndarray:
    X = np.empty((len(records), len(schema)))
    for i, rec in enumerate(records):
        for j, spec in enumerate(schema):
            X[i, j] = encode_value(spec, record_value(rec, spec.name))
    return X


def outcomes_from_labels(timelines, report, window_days: float = 30.0) -> dict:
    """Map record_id -> (time, event) for rows that can seed a readmission.

    A row is complete when the next record of the patient is a PAR whose
    prior is this row; otherwise it is censored at the gap to the next
    record or at the window, whichever comes first.
    """
    out = {}
    status = {o.record_id: o for o in report.outcomes}
    for tl in timelines:
        recs = [r for r in tl.records if r.record_id in status and status[r.record_id].in_context]
        for k, rec in enumerate(recs):
            if status[rec.record_id].role == "excluded":
                continue
            t, event = float(window_days), False
            if k + 1 < len(recs):
                later = recs[k + 1]
                lo = status[later.record_id]
                gap = (later.admit_time - rec.discharge_time).total_seconds() / 86400.0
                if gap <= window_days:
                    t = max(gap, MINUTE)
                    event = bool(lo.is_par and lo.prior_record_id == rec.record_id)
            out[rec.record_id] = (t, event)
    return out


def build_frame(records, outcomes: dict, schema=DEFAULT_VARIABLES) -> ModelFrame:
    """Frame over the records present in ``outcomes`` (record order kept)."""
    rows = [r for r in records if r.record_id in outcomes]
    X = design_matrix(rows, schema)
    times = np.array([outcomes[r.record_id][0] for r in rows], dtype=float)
    events = np.array([bool(outcomes[r.record_id][1]) for r in rows], dtype=bool)
    return ModelFrame(
        X=X,
        times=times,
        events=events,
        patient_ids=np.array([r.patient_id for r in rows], dtype=object),
        record_ids=np.array([r.record_id for r in rows], dtype=object),
        schema=tuple(schema),
    )


def frame_to_json(frame: ModelFrame) -> dict:
    return {
        "schema": [v.to_dict() for v in frame.schema],
        "rows": frame.to_rows(),
        "fill_values": frame.fill_values,
    }


def frame_from_json(d: dict) -> ModelFrame:
    schema = tuple(VariableSpec.from_dict(v) for v in d["schema"])
    rows = d["rows"]
    X = np.array([[math.nan if r[v.name] is None else r[v.name] for v in schema] for r in rows],
                 dtype=float).reshape(len(rows), len(schema))
    return ModelFrame(
        X=X,
        times=np.array([r["time"] for r in rows], dtype=float),
        events=np.array([bool(r["event"]) for r in rows], dtype=bool),
        patient_ids=np.array([r["patient_id"] for r in rows], dtype=object),
        record_ids=np.array([r["record_id"] for r in rows], dtype=object),
        schema=schema,
        fill_values=dict(d.get("fill_values", {})),
    )
