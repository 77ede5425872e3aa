"""Administrative admission records: schema, file ingest and patient timelines."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path

FACILITIES = ("AA", "BC", "DET", "SAG")  # Ann Arbor, Battle Creek, Detroit, Saginaw
COHORTS = ("HF", "AMI", "PN", "COPD", "OTHER")
DISCHARGE_STATUSES = (
    "home",
    "death",
    "transfer_internal",
    "transfer_external",
    "against_medical_advice",
    "other",
)
WARD_TYPES = (
    "acute",
    "long_term",
    "nursing_home",
    "psychiatry",
    "rehabilitation",
    "hospice",
    "palliative",
    "domiciliary",
)
SEXES = ("M", "F")
RACES = ("Black", "White", "Other")
MARITAL_STATUSES = ("married", "never_married", "previously_married", "unknown")
INSURANCES = ("Medicare", "Medicaid", "Private", "None")
ADMISSION_SOURCES = ("home", "outpatient", "transfer", "NHCU", "domiciliary", "other")
DISTANCE_LEVELS = ("near", "middle", "far")
COMORBIDITIES = (
    "cad",
    "heart_failure",
    "vascular_wc",
    "cardiorespiratory",
    "pneumonia",
    "atrial_fibrillation",
    "anemia",
    "diabetes",
    "copd",
    "chronic_bronchitis",
    "malignant_neoplasm",
    "mental_disorder",
    "substance_abuse",
)

TIME_FORMAT = "%Y-%m-%dT%H:%M"


class SchemaError(ValueError):
    """Structural problem with a record file (unknown column, bad header)."""


class IngestError(ValueError):
    """Every row of a file was rejected."""

    def __init__(self, message, rejects=()):
        super().__init__(message)
        self.rejects = list(rejects)


class RowError(ValueError):
    def __init__(self, reason_code: str, detail: str):
        super().__init__(detail)
        self.reason_code = reason_code
        self.detail = detail


@dataclass(frozen=True)
class CovariateVector:
    age: int
    sex: str
    race: str = "White"
    marital_status: str = "married"
    insurance: str = "Medicare"
    income: float | None = None
    length_of_stay: float = 0.0
    admission_source: str = "home"
    enrollment_priority: int = 5
    distance_miles: float | None = None
    distance_level: str | None = None
    agent_orange: bool = False
    pow: bool = False
    radiation: bool = False
    veteran: bool = True
    drg: str = ""
    hcc_codes: tuple = ()
    can_score: int | None = None
    past_year_hospitalizations: int = 0
    sequence: int = 0
    charlson_index: float | None = None
    comorbidities: frozenset = frozenset()

    def has(self, flag: str) -> bool:
        return flag in self.comorbidities


@dataclass(frozen=True)
class AdmissionRecord:
    record_id: str
    patient_id: str
    facility: str
    admit_time: datetime
    discharge_time: datetime
    cohort: str
    principal_dx: str
    secondary_dx: tuple = ()
    procedures: tuple = ()
    discharge_status: str = "home"
    ward_type: str = "acute"
    charge: float = 10000.0
    covariates: CovariateVector = field(default_factory=lambda: CovariateVector(age=70, sex="M"))
    enrolled: bool = True

    @property
    def all_dx(self) -> tuple:
        return (self.principal_dx,) + tuple(self.secondary_dx)

    @property
    def los_days(self) -> float:
        return (self.discharge_time - self.admit_time).total_seconds() / 86400.0


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    records: tuple
    merged: dict = field(default_factory=dict)  # kept record_id -> absorbed record_ids


@dataclass
class IngestOptions:
    charge_min: float = 200.0
    charge_max: float = 4_000_000.0
    distance_max: float = 3000.0
    check_charge: bool = True
    check_distance: bool = True


@dataclass
class Reject:
    row: int
    reason_code: str
    detail: str

    def to_dict(self):
        return {"row": self.row, "reason_code": self.reason_code, "detail": self.detail}


@dataclass
class Dataset:
    records: tuple
    rejects: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict:
        return {r.record_id: r for r in self.records}


# ---------------------------------------------------------------------------
# flat schema

RECORD_COLUMNS = (
    "record_id",
    "patient_id",
    "facility",
    "admit_time",
    "discharge_time",
    "cohort",
    "principal_dx",
    "secondary_dx",
    "procedures",
    "discharge_status",
    "ward_type",
    "charge",
    "enrolled",
)
COVARIATE_COLUMNS = (
    "age",
    "sex",
    "race",
    "marital_status",
    "insurance",
    "income",
    "length_of_stay",
    "admission_source",
    "enrollment_priority",
    "distance_miles",
    "distance_level",
    "agent_orange",
    "pow",
    "radiation",
    "veteran",
    "drg",
    "hcc_codes",
    "can_score",
    "past_year_hospitalizations",
    "sequence",
    "charlson_index",
)
COMORBIDITY_COLUMNS = tuple(f"cm_{c}" for c in COMORBIDITIES)
COLUMNS = RECORD_COLUMNS + COVARIATE_COLUMNS + COMORBIDITY_COLUMNS
REQUIRED = (
    "record_id",
    "patient_id",
    "facility",
    "admit_time",
    "discharge_time",
    "cohort",
    "principal_dx",
    "age",
    "sex",
)
LIST_FIELDS = ("secondary_dx", "procedures", "hcc_codes")
BOOL_FIELDS = ("enrolled", "agent_orange", "pow", "radiation", "veteran") + COMORBIDITY_COLUMNS
ENUMS = {
    "facility": FACILITIES,
    "cohort": COHORTS,
    "discharge_status": DISCHARGE_STATUSES,
    "ward_type": WARD_TYPES,
    "sex": SEXES,
    "race": RACES,
    "marital_status": MARITAL_STATUSES,
    "insurance": INSURANCES,
    "admission_source": ADMISSION_SOURCES,
    "distance_level": DISTANCE_LEVELS,
}


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, str) and v.strip() == "")


def _parse_bool(name, v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "y", "t"):
        return True
    if s in ("0", "false", "no", "n", "f"):
        return False
    raise RowError("type_mismatch", f"{name}: cannot parse boolean from {v!r}")


def _parse_float(name, v):
    if isinstance(v, bool):
        raise RowError("type_mismatch", f"{name}: expected number, got {v!r}")
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise RowError("type_mismatch", f"{name}: expected number, got {v!r}") from None
    if not math.isfinite(x):
        raise RowError("type_mismatch", f"{name}: non-finite value {v!r}")
    return x


def _parse_int(name, v):
    x = _parse_float(name, v)
    if x != int(x):
        raise RowError("type_mismatch", f"{name}: expected integer, got {v!r}")
    return int(x)


def _parse_time(name, v):
    if isinstance(v, datetime):
        return v.replace(second=0, microsecond=0)
    try:
        t = datetime.fromisoformat(str(v).strip())
    except ValueError:
        raise RowError("type_mismatch", f"{name}: bad timestamp {v!r}") from None
    return t.replace(second=0, microsecond=0, tzinfo=None)


def _parse_list(v):
    if _is_missing(v):
        return ()
    if isinstance(v, (list, tuple)):
        return tuple(str(x) for x in v)
    return tuple(s.strip() for s in str(v).split(";") if s.strip())


def _enum(name, v):
    s = str(v).strip()
    if s not in ENUMS[name]:
        raise RowError("invalid_enum", f"{name}: {s!r} not in {ENUMS[name]}")
    return s


def parse_row(row: dict, options: IngestOptions | None = None) -> AdmissionRecord:
    """Build a record from a flat mapping; raises RowError with a reason code."""
    options = options or IngestOptions()
    for name in REQUIRED:
        if _is_missing(row.get(name)):
            raise RowError("missing_field", f"{name} is required")

    def opt(name, parse, default=None):
        v = row.get(name)
        return default if _is_missing(v) else parse(name, v)

    admit = _parse_time("admit_time", row["admit_time"])
    discharge = _parse_time("discharge_time", row["discharge_time"])
    if discharge < admit:
        raise RowError("date_order", f"discharge {discharge} precedes admission {admit}")
    can = opt("can_score", _parse_int)
    if can is not None and not 0 <= can <= 99:
        raise RowError("range", f"can_score {can} outside [0, 99]")
    priority = opt("enrollment_priority", _parse_int, 5)
    if not 1 <= priority <= 8:
        raise RowError("range", f"enrollment_priority {priority} outside 1..8")
    distance = opt("distance_miles", _parse_float)
    if distance is not None and distance < 0:
        raise RowError("range", f"distance_miles {distance} is negative")
    if options.check_distance and distance is not None and distance > options.distance_max:
        raise RowError("distance_bounds", f"distance {distance} exceeds {options.distance_max} miles")
    charge = opt("charge", _parse_float, 10000.0)
    if options.check_charge and not (options.charge_min <= charge <= options.charge_max):
        raise RowError(
            "charge_bounds", f"charge {charge} outside [{options.charge_min}, {options.charge_max}]"
        )
    age = _parse_int("age", row["age"])
    if age < 0:
        raise RowError("range", f"age {age} is negative")
    for name in ("past_year_hospitalizations", "sequence"):
        if not _is_missing(row.get(name)) and _parse_int(name, row[name]) < 0:
            raise RowError("range", f"{name} is negative")
    charlson = opt("charlson_index", _parse_float)
    if charlson is not None and charlson < 0:
        raise RowError("range", "charlson_index is negative")
    comorb = frozenset(c for c in COMORBIDITIES if opt(f"cm_{c}", _parse_bool, False))
    cov = CovariateVector(
        age=age,
        sex=_enum("sex", row["sex"]),
        race=opt("race", lambda n, v: _enum(n, v), "White"),
        marital_status=opt("marital_status", lambda n, v: _enum(n, v), "unknown"),
        insurance=opt("insurance", lambda n, v: _enum(n, v), "None"),
        income=opt("income", _parse_float),
        length_of_stay=(discharge - admit).total_seconds() / 86400.0,
        admission_source=opt("admission_source", lambda n, v: _enum(n, v), "home"),
        enrollment_priority=priority,
        distance_miles=distance,
        distance_level=opt("distance_level", lambda n, v: _enum(n, v)),
        agent_orange=opt("agent_orange", _parse_bool, False),
        pow=opt("pow", _parse_bool, False),
        radiation=opt("radiation", _parse_bool, False),
        veteran=opt("veteran", _parse_bool, True),
        drg="" if _is_missing(row.get("drg")) else str(row["drg"]).strip(),
        hcc_codes=_parse_list(row.get("hcc_codes")),
        can_score=can,
        past_year_hospitalizations=opt("past_year_hospitalizations", _parse_int, 0),
        sequence=opt("sequence", _parse_int, 0),
        charlson_index=charlson,
        comorbidities=comorb,
    )
    return AdmissionRecord(
        record_id=str(row["record_id"]).strip(),
        patient_id=str(row["patient_id"]).strip(),
        facility=_enum("facility", row["facility"]),
        admit_time=admit,
        discharge_time=discharge,
        cohort=_enum("cohort", row["cohort"]),
        principal_dx=str(row["principal_dx"]).strip(),
        secondary_dx=_parse_list(row.get("secondary_dx")),
        procedures=_parse_list(row.get("procedures")),
        discharge_status=opt("discharge_status", lambda n, v: _enum(n, v), "home"),
        ward_type=opt("ward_type", lambda n, v: _enum(n, v), "acute"),
        charge=charge,
        covariates=cov,
        enrolled=opt("enrolled", _parse_bool, True),
    )


def _fmt_float(x):
    if x is None:
        return None
    return repr(float(x))


def record_to_row(rec: AdmissionRecord, for_json: bool = False) -> dict:
    """Flatten a record; lists become ';'-joined strings unless ``for_json``."""
    c = rec.covariates

    def lst(v):
        return list(v) if for_json else ";".join(v)

    def b(v):
        return bool(v) if for_json else ("1" if v else "0")

    def num(v):
        if v is None:
            return None if for_json else ""
        return v if for_json else repr(v)

    row = {
        "record_id": rec.record_id,
        "patient_id": rec.patient_id,
        "facility": rec.facility,
        "admit_time": rec.admit_time.strftime(TIME_FORMAT),
        "discharge_time": rec.discharge_time.strftime(TIME_FORMAT),
        "cohort": rec.cohort,
        "principal_dx": rec.principal_dx,
        "secondary_dx": lst(rec.secondary_dx),
        "procedures": lst(rec.procedures),
        "discharge_status": rec.discharge_status,
        "ward_type": rec.ward_type,
        "charge": num(float(rec.charge)),
        "enrolled": b(rec.enrolled),
        "age": num(c.age),
        "sex": c.sex,
        "race": c.race,
        "marital_status": c.marital_status,
        "insurance": c.insurance,
        "income": num(None if c.income is None else float(c.income)),
        "length_of_stay": num(float(c.length_of_stay)),
        "admission_source": c.admission_source,
        "enrollment_priority": num(c.enrollment_priority),
        "distance_miles": num(None if c.distance_miles is None else float(c.distance_miles)),
        "distance_level": c.distance_level if c.distance_level is not None else (None if for_json else ""),
        "agent_orange": b(c.agent_orange),
        "pow": b(c.pow),
        "radiation": b(c.radiation),
        "veteran": b(c.veteran),
        "drg": c.drg,
        "hcc_codes": lst(c.hcc_codes),
        "can_score": num(c.can_score),
        "past_year_hospitalizations": num(c.past_year_hospitalizations),
        "sequence": num(c.sequence),
        "charlson_index": num(None if c.charlson_index is None else float(c.charlson_index)),
    }
    for name in COMORBIDITIES:
        row[f"cm_{name}"] = b(name in c.comorbidities)
    return row


def _is_jsonl(path: Path) -> bool:
    return path.suffix.lower() in (".jsonl", ".ndjson", ".json")


def ingest(path, options: IngestOptions | None = None) -> Dataset:
    """Read a delimited-text (header row) or line-JSON record file.

    Rows failing validation are collected in ``Dataset.rejects``; the call
    only fails outright if the file is unreadable, has unknown columns, or
    every row is rejected.
    """
    options = options or IngestOptions()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    rows = []
    if _is_jsonl(path):
        for i, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                rows.append((i, RowError("parse_error", f"invalid JSON: {exc}")))
                continue
            if not isinstance(obj, dict):
                rows.append((i, RowError("parse_error", "line is not a JSON object")))
                continue
            unknown = set(obj) - set(COLUMNS)
            if unknown:
                raise SchemaError(f"{path}: unknown column(s) {sorted(unknown)}")
            rows.append((i, obj))
    else:
        reader = csv.DictReader(text.splitlines())
        header = reader.fieldnames or []
        unknown = set(header) - set(COLUMNS)
        if unknown:
            raise SchemaError(f"{path}: unknown column(s) {sorted(unknown)}")
        for i, row in enumerate(reader, start=1):
            if None in row:
                rows.append((i, RowError("parse_error", "row has more fields than the header")))
                continue
            rows.append((i, row))
    records = []
    rejects = []
    seen = set()
    for i, row in rows:
        if isinstance(row, RowError):
            rejects.append(Reject(i, row.reason_code, row.detail))
            continue
        try:
            rec = parse_row(row, options)
        except RowError as err:
            rejects.append(Reject(i, err.reason_code, err.detail))
            continue
        if rec.record_id in seen:
            rejects.append(Reject(i, "duplicate_id", f"record_id {rec.record_id} repeated"))
            continue
        seen.add(rec.record_id)
        records.append(rec)
    if rows and not records:
        raise IngestError(f"{path}: all {len(rows)} rows rejected", rejects)
    return Dataset(tuple(records), rejects)


def serialize(records, path) -> None:
    """Write records as CSV, or JSON lines when the suffix is .jsonl."""
    path = Path(path)
    recs = list(records)
    if _is_jsonl(path):
        with path.open("w", encoding="utf-8") as fh:
            for r in recs:
                fh.write(json.dumps(record_to_row(r, for_json=True), sort_keys=True) + "\n")
        return
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in recs:
            w.writerow(record_to_row(r))


def write_rejects(rejects, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rj in rejects:
            fh.write(json.dumps(rj.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# timelines


def _merge_group(group):
    base = group[0]
    last = max(group, key=lambda r: (r.discharge_time, r.record_id))
    sec = []
    for r in group:
        for code in (r.principal_dx,) + tuple(r.secondary_dx):
            if code != base.principal_dx and code not in sec:
                sec.append(code)
    procs = []
    for r in group:
        for code in r.procedures:
            if code not in procs:
                procs.append(code)
    los = (last.discharge_time - base.admit_time).total_seconds() / 86400.0
    return replace(
        base,
        discharge_time=last.discharge_time,
        discharge_status=last.discharge_status,
        secondary_dx=tuple(sec),
        procedures=tuple(procs),
        charge=float(sum(r.charge for r in group)),
        covariates=replace(base.covariates, length_of_stay=los),
    )


def build_timelines(dataset) -> list:
    """One time-ordered timeline per patient, same-day same-unit stays merged.

    A unit is the (facility, ward_type) pair; records sharing patient,
    admission date and unit collapse into one record that keeps the
    earliest admission, the latest discharge and the union of codes.
    """
    by_patient = defaultdict(list)
    for rec in dataset:
        by_patient[rec.patient_id].append(rec)
    out = []
    for pid in sorted(by_patient):
        recs = sorted(by_patient[pid], key=lambda r: (r.admit_time, r.record_id))
        groups = defaultdict(list)
        order = []
        for r in recs:
            key = (r.admit_time.date(), r.facility, r.ward_type)
            if key not in groups:
                order.append(key)
            groups[key].append(r)
        merged = {}
        final = []
        for key in order:
            g = groups[key]
            if len(g) == 1:
                final.append(g[0])
            else:
                final.append(_merge_group(g))
                merged[g[0].record_id] = tuple(r.record_id for r in g[1:])
        final.sort(key=lambda r: (r.admit_time, r.record_id))
        out.append(PatientTimeline(pid, tuple(final), merged))
    return out


def record_fields() -> list:
    return [f.name for f in fields(AdmissionRecord)]


def records_equal(a: AdmissionRecord, b: AdmissionRecord) -> bool:
    return asdict(a) == asdict(b)
