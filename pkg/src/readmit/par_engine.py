"""Potentially avoidable readmission (PAR) labeling.

The pipeline runs over patient timelines:

1. cohort elimination and same-day merging (done by the timeline builder);
2. role assignment: a record admitted within the window after the prior
   record's discharge is a readmission candidate;
3. exclusions, each a pure predicate on a record and its context;
4. clinical relation of each surviving readmission to its index admission;
5. reviewer overrides;
6. PAR series, reclassification of unrelated readmissions, and rates.

Rule tables are plain JSON documents so code lists stay external data.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .records import Dataset, PatientTimeline, build_timelines

ADMISSION_RULES = ("III.a", "III.b", "III.c")
READMISSION_RULES = ("III.d", "III.e", "III.f")
BOTH_RULES = ("III.g", "III.h", "III.i", "III.j", "III.k")
STEP_III = ADMISSION_RULES + READMISSION_RULES + BOTH_RULES
RELATIONS = ("Va", "Vb", "Vc", "Vd", "Ve", "Vf", "Vg", "Vh")
MAP_RELATIONS = ("Vb", "Vc", "Vd", "Vg", "Vh")
SURGICAL_RELATIONS = ("Vg", "Vh")
STUDY_COHORTS = ("HF", "AMI", "PN", "COPD")

# tables needed by each rule; a missing table for an enabled rule is an error
RULE_TABLES = {
    "I": ("cohort_codes",),
    "III.e": ("planned_procedures", "acute_or_complication_categories", "condition_categories"),
    "III.f": ("pci_cabg_procedures", "ami_exempt_dx"),
    "III.h": ("high_mortality_dx",),
    "III.i": ("specialized_condition_dx",),
    "Va": ("acsc_codes",),
    "Ve": ("mental_substance_codes",),
    "Vf": ("mental_substance_codes",),
    "Vb": ("clinical_relation_map", "condition_categories"),
    "Vc": ("clinical_relation_map", "condition_categories"),
    "Vd": ("clinical_relation_map", "condition_categories"),
    "Vg": ("clinical_relation_map", "condition_categories"),
    "Vh": ("clinical_relation_map", "condition_categories"),
}


class RuleConfigError(ValueError):
    """Rule tables or configuration are inconsistent."""


class ZeroEligibleError(ValueError):
    """No eligible admissions: the rate is undefined."""


# ---------------------------------------------------------------------------
# rule tables


class CodeSet:
    """Exact codes plus prefix patterns written with a trailing ``*``."""

    def __init__(self, codes=()):
        codes = [str(c).strip() for c in codes]
        self.exact = frozenset(c for c in codes if not c.endswith("*"))
        self.prefixes = tuple(sorted(c[:-1] for c in codes if c.endswith("*")))

    def __contains__(self, code) -> bool:
        if code in self.exact:
            return True
        return any(code.startswith(p) for p in self.prefixes)

    def __len__(self):
        return len(self.exact) + len(self.prefixes)

    def any_of(self, codes) -> bool:
        return any(c in self for c in codes)

    def to_list(self) -> list:
        return sorted(self.exact) + [p + "*" for p in self.prefixes]


@dataclass
class RuleTables:
    cohort_codes: dict = field(default_factory=dict)  # cohort -> CodeSet
    condition_categories: list = field(default_factory=list)  # [(category, CodeSet)], first match wins
    planned_procedures: CodeSet | None = None
    acute_or_complication_categories: frozenset | None = None
    pci_cabg_procedures: CodeSet | None = None
    ami_exempt_dx: CodeSet | None = None
    high_mortality_dx: CodeSet | None = None
    specialized_condition_dx: CodeSet | None = None
    acsc_codes: CodeSet | None = None
    clinical_relation_map: dict | None = None  # (index_cat, readmit_cat) -> tuple of relations
    mental_substance_codes: CodeSet | None = None
    prosthesis_fitting_dx: CodeSet | None = None
    valid_hcc_codes: frozenset | None = None
    versions: dict = field(default_factory=dict)

    def category(self, code: str) -> str | None:
        for cat, codes in self.condition_categories:
            if code in codes:
                return cat
        return None

    def cohort_of(self, code: str) -> str | None:
        for cohort in sorted(self.cohort_codes):
            if code in self.cohort_codes[cohort]:
                return cohort
        return None

    def present(self, name: str) -> bool:
        value = getattr(self, name)
        if value is None:
            return False
        return len(value) > 0

    def validate(self, config: ParConfig) -> None:
        for rule, tables in RULE_TABLES.items():
            if not config.enabled(rule):
                continue
            for t in tables:
                if not self.present(t):
                    raise RuleConfigError(f"rule {rule} is enabled but table {t!r} is missing or empty")

    @classmethod
    def load(cls, directory) -> RuleTables:
        """Read every ``<table>.json`` in ``directory``."""
        directory = Path(directory)
        if not directory.is_dir():
            raise RuleConfigError(f"rule table directory {directory} does not exist")
        docs = {}
        for path in sorted(directory.glob("*.json")):
            try:
                docs[path.stem] = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise RuleConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_documents(docs)

    @classmethod
    def from_documents(cls, docs: dict) -> RuleTables:
        known = set(cls.__dataclass_fields__) - {"versions"}
        t = cls()
        for name, doc in docs.items():
            if name not in known:
                raise RuleConfigError(f"unknown rule table {name!r}")
            if not isinstance(doc, dict) or "table_version" not in doc:
                raise RuleConfigError(f"table {name!r} lacks a table_version field")
            t.versions[name] = str(doc["table_version"])
            if name == "cohort_codes":
                t.cohort_codes = {k: CodeSet(v) for k, v in doc["map"].items()}
            elif name == "condition_categories":
                t.condition_categories = [(cat, CodeSet(codes)) for cat, codes in doc["map"].items()]
            elif name == "clinical_relation_map":
                rel = defaultdict(list)
                for e in doc["entries"]:
                    r = e["relation"]
                    if r not in MAP_RELATIONS:
                        raise RuleConfigError(f"relation map entry uses {r!r}; only {MAP_RELATIONS} are map-driven")
                    key = (e["index_category"], e["readmission_category"])
                    if r not in rel[key]:
                        rel[key].append(r)
                t.clinical_relation_map = {k: tuple(sorted(v, key=MAP_RELATIONS.index)) for k, v in rel.items()}
            elif name in ("acute_or_complication_categories", "valid_hcc_codes"):
                setattr(t, name, frozenset(str(c) for c in doc["codes"]))
            else:
                setattr(t, name, CodeSet(doc["codes"]))
        return t

    def to_documents(self) -> dict:
        v = self.versions
        docs = {}
        if self.cohort_codes:
            docs["cohort_codes"] = {"table_version": v.get("cohort_codes", "1"),
                                    "map": {k: s.to_list() for k, s in sorted(self.cohort_codes.items())}}
        if self.condition_categories:
            docs["condition_categories"] = {"table_version": v.get("condition_categories", "1"),
                                            "map": {c: s.to_list() for c, s in self.condition_categories}}
        if self.clinical_relation_map:
            entries = [{"index_category": a, "readmission_category": b, "relation": r}
                       for (a, b), rels in sorted(self.clinical_relation_map.items()) for r in rels]
            docs["clinical_relation_map"] = {"table_version": v.get("clinical_relation_map", "1"), "entries": entries}
        for name in ("planned_procedures", "pci_cabg_procedures", "ami_exempt_dx", "high_mortality_dx",
                     "specialized_condition_dx", "acsc_codes", "mental_substance_codes", "prosthesis_fitting_dx"):
            s = getattr(self, name)
            if s is not None:
                docs[name] = {"table_version": v.get(name, "1"), "codes": s.to_list()}
        for name in ("acute_or_complication_categories", "valid_hcc_codes"):
            s = getattr(self, name)
            if s is not None:
                docs[name] = {"table_version": v.get(name, "1"), "codes": sorted(s)}
        return docs


def default_rule_tables() -> RuleTables:
    """The small synthetic tables shipped with the package."""
    base = resources.files("readmit") / "data" / "rules"
    docs = {}
    for entry in base.iterdir():
        if entry.name.endswith(".json"):
            docs[entry.name[:-5]] = json.loads(entry.read_text(encoding="utf-8"))
    return RuleTables.from_documents(docs)


def default_rules_dir() -> Path:
    return Path(str(resources.files("readmit") / "data" / "rules"))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ParConfig:
    window_days: float = 30.0
    min_gap_hours: float = 24.0
    transfer_gap_hours: float = 24.0
    disabled_rules: tuple = ()
    cohort_dx_scope: str = "principal_or_secondary"  # or "principal"
    ami_exempt_scope: str = "principal_or_secondary"  # or "principal"
    exclusion_dx_scope: str = "principal_or_secondary"  # for III.g-i
    excluded_wards: tuple = ("long_term", "nursing_home", "psychiatry", "rehabilitation", "hospice", "palliative")
    charge_min: float = 200.0
    charge_max: float = 4_000_000.0
    distance_max: float = 3000.0
    age_min: int = 18
    age_max: int = 120
    study_cohorts: tuple = STUDY_COHORTS

    def __post_init__(self):
        self.disabled_rules = tuple(self.disabled_rules)
        self.excluded_wards = tuple(self.excluded_wards)
        self.study_cohorts = tuple(self.study_cohorts)
        unknown = set(self.disabled_rules) - set(("I",) + STEP_III + RELATIONS)
        if unknown:
            raise RuleConfigError(f"unknown rule identifiers {sorted(unknown)}")
        if self.cohort_dx_scope not in ("principal_or_secondary", "principal"):
            raise RuleConfigError("cohort_dx_scope must be 'principal_or_secondary' or 'principal'")
        if self.ami_exempt_scope not in ("principal_or_secondary", "principal"):
            raise RuleConfigError("ami_exempt_scope must be 'principal_or_secondary' or 'principal'")
        if self.exclusion_dx_scope not in ("principal_or_secondary", "principal"):
            raise RuleConfigError("exclusion_dx_scope must be 'principal_or_secondary' or 'principal'")
        if not self.window_days > 0:
            raise RuleConfigError("window_days must be > 0")

    def enabled(self, rule: str) -> bool:
        return rule not in self.disabled_rules

    @classmethod
    def everything_disabled(cls, **kw) -> ParConfig:
        return cls(disabled_rules=STEP_III + RELATIONS, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> ParConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise RuleConfigError(f"unknown label config field(s) {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# data structures


@dataclass(frozen=True)
class RecordContext:
    record_id: str
    patient_id: str
    position: int  # index within the patient's in-context records
    prior_record_id: str | None
    gap_days: float | None  # admission minus prior discharge
    role: str  # admission | readmission
    internal_transfer_out: bool = False  # discharged to a study facility and continued there
    chain_head_id: str | None = None  # first record of the readmission chain this one belongs to


@dataclass
class Roles:
    """Output of role assignment: per-record context and the two sets."""

    records: dict  # record_id -> AdmissionRecord (in-context only)
    order: list  # patient-ordered record ids
    contexts: dict  # record_id -> RecordContext
    admission_set: frozenset
    readmission_set: frozenset
    eliminated: dict  # record_id -> reason ("I.cohort" or "I.merged")
    audit: list = field(default_factory=list)


@dataclass
class Exclusions(Roles):
    admission_hits: dict = field(default_factory=dict)  # record_id -> tuple of rules
    readmission_hits: dict = field(default_factory=dict)


@dataclass
class LabelOutcome:
    record_id: str
    patient_id: str
    role: str  # eligible_admission | readmission | excluded
    exclusion_reason: str | None = None
    relation_category: str | None = None
    is_par: bool = False
    series_id: str | None = None
    override_applied: bool = False
    prior_record_id: str | None = None
    index_record_id: str | None = None
    orphan: bool = False
    reclassified: bool = False
    in_context: bool = True
    cohort: str | None = None
    facility: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParSeries:
    series_id: str
    index_record_id: str
    par_record_ids: list
    span_days: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabelReport:
    outcomes: list
    series: list
    eligible_count: int
    par_count: int
    par_series_count: int
    par_rate: float | None
    per_cohort_rates: dict
    per_facility_rates: dict
    audit: list
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    table_versions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "eligible_count": self.eligible_count,
            "par_count": self.par_count,
            "par_series_count": self.par_series_count,
            "par_rate": self.par_rate,
            "per_cohort_rates": self.per_cohort_rates,
            "per_facility_rates": self.per_facility_rates,
            "outcomes": [o.to_dict() for o in self.outcomes],
            "series": [s.to_dict() for s in self.series],
            "audit": [{"step": s, "rule": r, "record_ids": list(ids)} for s, r, ids in self.audit],
            "errors": list(self.errors),
            "warnings": list(self.warnings),
            "table_versions": dict(sorted(self.table_versions.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_rows(self) -> list:
        """(cohort, facility, eligible, series, rate) rows, totals included."""
        el = defaultdict(int)
        se = defaultdict(int)
        by_id = {o.record_id: o for o in self.outcomes}
        for o in self.outcomes:
            if o.role == "eligible_admission":
                for key in ((o.cohort, o.facility), (o.cohort, "ALL"), ("ALL", o.facility), ("ALL", "ALL")):
                    el[key] += 1
        for s in self.series:
            idx = by_id[s.index_record_id]
            for key in ((idx.cohort, idx.facility), (idx.cohort, "ALL"), ("ALL", idx.facility), ("ALL", "ALL")):
                se[key] += 1
        keys = sorted(set(el) | set(se), key=lambda k: (k[0] == "ALL", k[0], k[1] == "ALL", k[1]))
        rows = []
        for k in keys:
            e = el.get(k, 0)
            s = se.get(k, 0)
            rows.append({"cohort": k[0], "facility": k[1], "eligible": e, "series": s,
                         "rate": (s / e) if e else None})
        return rows

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["cohort", "facility", "eligible", "series", "rate"], lineterminator="\n")
        w.writeheader()
        for row in self.summary_rows():
            row = dict(row)
            row["rate"] = "" if row["rate"] is None else f"{row['rate']:.6f}"
            w.writerow(row)
        return buf.getvalue()


def par_rate(series_count: int, eligible_count: int) -> float:
    """Number of PAR series over number of eligible admissions."""
    if eligible_count <= 0:
        raise ZeroEligibleError("rate undefined: no eligible admissions")
    return series_count / eligible_count


# ---------------------------------------------------------------------------
# step II: roles


def _hours(delta) -> float:
    return delta.total_seconds() / 3600.0


def _in_study(rec, tables: RuleTables, config: ParConfig) -> bool:
    if not config.enabled("I") or not tables.cohort_codes:
        return rec.cohort in config.study_cohorts
    codes = rec.all_dx if config.cohort_dx_scope == "principal_or_secondary" else (rec.principal_dx,)
    return any(tables.cohort_of(c) in config.study_cohorts for c in codes)


def classify_roles(timelines, tables: RuleTables | None = None, config: ParConfig | None = None) -> Roles:
    """Admission / readmission roles for every in-study record.

    Records outside the study cohorts are eliminated first and never act
    as context.  A record admitted within the window after the preceding
    record's discharge is a readmission candidate.  When the preceding
    record was discharged to another study facility and this stay started
    within the transfer gap, this record continues that stay: it takes over
    the preceding record's context (the final discharging hospital is
    responsible) and the preceding record is flagged as transferred out.
    """
    config = config or ParConfig()
    tables = tables or RuleTables()
    records, order, contexts, eliminated = {}, [], {}, {}
    admission, readmission = set(), set()
    audit_cohort = []
    audit_merged = []
    for tl in timelines:
        for kept, absorbed in sorted(tl.merged.items()):
            for rid in absorbed:
                eliminated[rid] = "I.merged"
                audit_merged.append(rid)
        recs = []
        for rec in tl.records:
            if _in_study(rec, tables, config):
                recs.append(rec)
            else:
                eliminated[rec.record_id] = "I.cohort"
                audit_cohort.append(rec.record_id)
        prev_ctx = None
        prev = None
        for pos, rec in enumerate(recs):
            prior_id, gap, role, head = None, None, "admission", rec.record_id
            if prev is not None:
                gap = (rec.admit_time - prev.discharge_time).total_seconds() / 86400.0
                transfer = (
                    config.enabled("III.b")
                    and prev.discharge_status == "transfer_internal"
                    and 0 <= _hours(rec.admit_time - prev.discharge_time) <= config.transfer_gap_hours
                )
                if transfer:
                    prior_id, gap, role, head = (
                        prev_ctx.prior_record_id, prev_ctx.gap_days, prev_ctx.role, prev_ctx.chain_head_id
                    )
                    # the stay continued elsewhere is judged at the final hospital
                    contexts[prev.record_id] = replace(prev_ctx, internal_transfer_out=True)
                    readmission.discard(prev.record_id)
                else:
                    prior_id = prev.record_id
                    if gap <= config.window_days:
                        role = "readmission"
                        head = prev_ctx.chain_head_id if prev_ctx.role == "readmission" else prev.record_id
            ctx = RecordContext(rec.record_id, rec.patient_id, pos, prior_id, gap, role, False, head)
            contexts[rec.record_id] = ctx
            records[rec.record_id] = rec
            order.append(rec.record_id)
            (readmission if role == "readmission" else admission).add(rec.record_id)
            # readmissions are admissions for subsequent events as well
            admission.add(rec.record_id)
            prev_ctx, prev = ctx, rec
    audit = []
    if audit_merged:
        audit.append(("I", "I.merged", tuple(audit_merged)))
    if audit_cohort:
        audit.append(("I", "I.cohort", tuple(audit_cohort)))
    return Roles(records, order, contexts, frozenset(admission), frozenset(readmission), eliminated, audit)


# ---------------------------------------------------------------------------
# step III: exclusions


def _dx_hit(rec, codes, scope: str) -> bool:
    if codes is None:
        return False
    if scope == "principal":
        return rec.principal_dx in codes
    return codes.any_of(rec.all_dx)


def _inconsistent(rec, tables: RuleTables, config: ParConfig) -> bool:
    c = rec.covariates
    if (c.pow or c.agent_orange or c.radiation) and not c.veteran:
        return True
    if not (config.charge_min <= rec.charge <= config.charge_max):
        return True
    if c.distance_miles is not None and c.distance_miles > config.distance_max:
        return True
    if rec.discharge_time < rec.admit_time:
        return True
    if not (config.age_min <= c.age <= config.age_max):
        return True
    if tables.valid_hcc_codes is not None and any(h not in tables.valid_hcc_codes for h in c.hcc_codes):
        return True
    return False


def rule_hits(rec, ctx: RecordContext, roles: Roles, tables: RuleTables, config: ParConfig) -> tuple:
    """Every enabled Step III rule whose predicate holds for this record."""
    hits = []
    on = config.enabled
    if on("III.a") and rec.discharge_status == "death":
        hits.append("III.a")
    if on("III.b") and (rec.discharge_status == "transfer_external" or ctx.internal_transfer_out):
        hits.append("III.b")
    if on("III.c") and rec.discharge_status == "against_medical_advice":
        hits.append("III.c")
    if ctx.role == "readmission" and ctx.prior_record_id is not None:
        if on("III.d") and ctx.gap_days * 24.0 < config.min_gap_hours:
            hits.append("III.d")
        if on("III.e") and tables.planned_procedures is not None:
            planned = tables.planned_procedures.any_of(rec.procedures)
            acute = tables.category(rec.principal_dx) in (tables.acute_or_complication_categories or ())
            if planned and not acute:
                hits.append("III.e")
        if on("III.f") and tables.pci_cabg_procedures is not None:
            head = roles.records.get(ctx.chain_head_id)
            index_cohort = head.cohort if head is not None else None
            if index_cohort == "AMI" and tables.pci_cabg_procedures.any_of(rec.procedures):
                if not _dx_hit(rec, tables.ami_exempt_dx, config.ami_exempt_scope):
                    hits.append("III.f")
    scope = config.exclusion_dx_scope
    if on("III.g") and (
        rec.ward_type in config.excluded_wards or _dx_hit(rec, tables.prosthesis_fitting_dx, scope)
    ):
        hits.append("III.g")
    if on("III.h") and _dx_hit(rec, tables.high_mortality_dx, "principal"):
        hits.append("III.h")
    if on("III.i") and _dx_hit(rec, tables.specialized_condition_dx, scope):
        hits.append("III.i")
    if on("III.j") and not rec.enrolled:
        hits.append("III.j")
    if on("III.k") and _inconsistent(rec, tables, config):
        hits.append("III.k")
    return tuple(hits)


def apply_exclusions(roles: Roles, tables: RuleTables, config: ParConfig | None = None) -> Exclusions:
    """Filter the admission and readmission sets by the Step III rules.

    Each rule targets the admission set (a-c), the readmission set (d-f) or
    both (g-k).  Rules are pure predicates, so the surviving sets do not
    depend on application order, and re-applying to the output is a no-op.
    """
    config = config or ParConfig()
    tables.validate(config)
    adm_hits, re_hits = {}, {}
    removed = OrderedDict((r, []) for r in STEP_III)
    for rid in roles.order:
        rec = roles.records[rid]
        ctx = roles.contexts[rid]
        hits = rule_hits(rec, ctx, roles, tables, config)
        adm_hits[rid] = tuple(h for h in hits if h not in READMISSION_RULES)
        re_hits[rid] = tuple(h for h in hits if h not in ADMISSION_RULES)
        if rid in roles.admission_set and adm_hits[rid]:
            for h in adm_hits[rid]:
                removed[h].append(rid)
        if rid in roles.readmission_set and re_hits[rid]:
            for h in re_hits[rid]:
                if rid not in removed[h]:
                    removed[h].append(rid)
    admission = frozenset(r for r in roles.admission_set if not adm_hits[r])
    readmission = frozenset(r for r in roles.readmission_set if not re_hits[r])
    audit = list(roles.audit)
    for rule, ids in removed.items():
        if ids:
            audit.append(("III", rule, tuple(ids)))
    return Exclusions(
        records=roles.records,
        order=roles.order,
        contexts=roles.contexts,
        admission_set=admission,
        readmission_set=readmission,
        eliminated=roles.eliminated,
        audit=audit,
        admission_hits=adm_hits,
        readmission_hits=re_hits,
    )


# ---------------------------------------------------------------------------
# step V: relations


def relate(index_rec, rec, tables: RuleTables, config: ParConfig) -> str:
    """Relation category of ``rec`` with respect to its index admission."""
    on = config.enabled
    if on("Va") and tables.acsc_codes is not None and rec.principal_dx in tables.acsc_codes:
        return "Va"
    ms = tables.mental_substance_codes
    if ms is not None and rec.principal_dx in ms:
        if index_rec.principal_dx in ms:
            if on("Vf"):
                return "Vf"
        elif on("Ve"):
            return "Ve"
    if tables.clinical_relation_map:
        key = (tables.category(index_rec.principal_dx), tables.category(rec.principal_dx))
        rels = tables.clinical_relation_map.get(key, ())
        surgical = len(rec.procedures) > 0
        for r in MAP_RELATIONS:
            if r in rels and on(r) and ((r in SURGICAL_RELATIONS) == surgical):
                return r
    return "unrelated"


def mark_relations(ex: Exclusions, tables: RuleTables, config: ParConfig | None = None) -> list:
    """Outcomes with a relation category for every surviving readmission.

    Relations are always judged against the admission that opened the
    chain: if the prior record is a PAR, its index is reused.  A
    readmission whose prior record was excluded is an orphan and is treated
    as an admission.  Non-PAR readmissions provisionally become admissions
    here so that later records can anchor on them; Step VIII confirms this.
    """
    config = config or ParConfig()
    out = {}
    for rid in ex.order:
        rec = ex.records[rid]
        ctx = ex.contexts[rid]
        o = LabelOutcome(rid, rec.patient_id, "excluded", prior_record_id=ctx.prior_record_id,
                         cohort=rec.cohort, facility=rec.facility)
        out[rid] = o
        if ctx.internal_transfer_out:
            o.exclusion_reason = "III.b"
            continue
        if ctx.role == "readmission":
            prior = out.get(ctx.prior_record_id)
            if prior is None or prior.role == "excluded":
                o.orphan = True
                adm = ex.admission_hits[rid]
                if adm:
                    o.exclusion_reason = adm[0]
                else:
                    o.role = "eligible_admission"
                continue
            if rid not in ex.readmission_set:
                o.exclusion_reason = ex.readmission_hits[rid][0]
                continue
            anchor = prior.index_record_id if prior.is_par else prior.record_id
            o.index_record_id = anchor
            o.role = "readmission"
            o.relation_category = relate(ex.records[anchor], rec, tables, config)
            o.is_par = o.relation_category != "unrelated"
        else:
            if rid in ex.admission_set:
                o.role = "eligible_admission"
            else:
                o.exclusion_reason = ex.admission_hits[rid][0]
    outcomes = [out[rid] for rid in ex.order]
    for rid, reason in ex.eliminated.items():
        outcomes.append(LabelOutcome(rid, _patient_of(rid, ex), "excluded", exclusion_reason=reason, in_context=False))
    return outcomes


def _patient_of(rid, ex):
    rec = ex.records.get(rid)
    return rec.patient_id if rec is not None else None


# ---------------------------------------------------------------------------
# step VI: overrides


OVERRIDE_ACTIONS = ("force_par", "force_not_par", "force_exclude")


@dataclass
class OverrideResult:
    outcomes: list
    errors: list
    warnings: list
    audit: list


def read_overrides(path) -> list:
    entries = []
    text = Path(path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RuleConfigError(f"{path}:{i}: invalid JSON ({exc})") from exc
        if e.get("action") not in OVERRIDE_ACTIONS or "record_id" not in e:
            raise RuleConfigError(f"{path}:{i}: override needs record_id and action in {OVERRIDE_ACTIONS}")
        entries.append(e)
    return entries


def apply_overrides(outcomes: list, overrides) -> OverrideResult:
    """Apply reviewer decisions; the last entry for a record wins."""
    by_id = {o.record_id: o for o in outcomes}
    errors, warns, touched = [], [], defaultdict(list)
    last = OrderedDict()
    for e in overrides or ():
        rid = str(e["record_id"])
        if rid not in by_id or not by_id[rid].in_context:
            errors.append(f"override for unknown record_id {rid!r} skipped")
            continue
        if rid in last and last[rid]["action"] != e["action"]:
            msg = f"conflicting overrides for {rid}: {last[rid]['action']} then {e['action']}; last entry wins"
            errors.append(msg)
            warnings.warn(msg, stacklevel=2)
            warns.append(msg)
        last[rid] = e
    result = []
    for o in outcomes:
        e = last.get(o.record_id)
        if e is None:
            result.append(o)
            continue
        o = replace(o)
        act = e["action"]
        if act == "force_exclude":
            o.role, o.exclusion_reason, o.is_par = "excluded", "VI", False
        elif act == "force_not_par":
            if o.role == "readmission":
                o.is_par = False
        elif act == "force_par":
            if o.role == "readmission" and o.index_record_id is not None:
                o.is_par = True
            else:
                errors.append(f"force_par on {o.record_id} ignored: not a readmission with an index admission")
                result.append(o)
                continue
        o.override_applied = True
        touched[act].append(o.record_id)
        result.append(o)
    audit = [("VI", act, tuple(ids)) for act, ids in sorted(touched.items())]
    return OverrideResult(result, errors, warns, audit)


# ---------------------------------------------------------------------------
# steps VII-IX


def build_series(outcomes: list, records: dict) -> list:
    """Group PARs tied to the same index admission into series.

    A PAR continues its prior's series when the prior is itself a PAR with
    the same index; otherwise it opens a new series.
    """
    by_id = {o.record_id: o for o in outcomes}
    series, sid_of = [], {}
    for o in outcomes:
        if not (o.is_par and o.role == "readmission"):
            continue
        prior = by_id.get(o.prior_record_id)
        if prior is not None and prior.record_id in sid_of and prior.index_record_id == o.index_record_id:
            s = series[sid_of[prior.record_id]]
            s.par_record_ids.append(o.record_id)
            sid_of[o.record_id] = sid_of[prior.record_id]
        else:
            s = ParSeries(f"S{len(series) + 1:05d}", o.index_record_id, [o.record_id], 0.0)
            sid_of[o.record_id] = len(series)
            series.append(s)
    for s in series:
        idx = records[s.index_record_id]
        last = records[s.par_record_ids[-1]]
        s.span_days = (last.admit_time - idx.discharge_time).total_seconds() / 86400.0
    for o in outcomes:
        if o.record_id in sid_of:
            o.series_id = series[sid_of[o.record_id]].series_id
    return series


def _rates(outcomes, series, key: str) -> dict:
    by_id = {o.record_id: o for o in outcomes}
    el, se = defaultdict(int), defaultdict(int)
    for o in outcomes:
        if o.role == "eligible_admission":
            el[getattr(o, key)] += 1
    for s in series:
        se[getattr(by_id[s.index_record_id], key)] += 1
    out = {}
    for k in sorted(set(el) | set(se), key=str):
        e = el.get(k, 0)
        out[str(k)] = {"eligible": e, "series": se.get(k, 0), "rate": (se.get(k, 0) / e) if e else None}
    return out


def reclassify_and_rate(outcomes: list, series: list, exclusions: Exclusions | None = None,
                        config: ParConfig | None = None, audit=None) -> LabelReport:
    """Move unrelated readmissions into the eligible set and compute rates.

    Readmissions that are not PARs become eligible admissions unless they
    ended in death, external transfer or self-discharge, in which case they
    are excluded under the matching admission rule.
    """
    config = config or ParConfig()
    final, moved, dropped = [], [], defaultdict(list)
    for o in outcomes:
        if o.role == "readmission" and not o.is_par:
            o = replace(o)
            hits = exclusions.admission_hits.get(o.record_id, ()) if exclusions is not None else ()
            blocking = [h for h in hits if h in ADMISSION_RULES]
            if blocking:
                o.role, o.exclusion_reason = "excluded", blocking[0]
                dropped[blocking[0]].append(o.record_id)
            else:
                o.role, o.reclassified = "eligible_admission", True
                moved.append(o.record_id)
            o.series_id = None
        final.append(o)
    eligible = sum(1 for o in final if o.role == "eligible_admission")
    pars = sum(1 for o in final if o.is_par)
    audit = list(audit or [])
    if moved:
        audit.append(("VIII", "reclassified", tuple(moved)))
    for rule, ids in sorted(dropped.items()):
        audit.append(("VIII", rule, tuple(ids)))
    errors = []
    try:
        rate = par_rate(len(series), eligible)
    except ZeroEligibleError as exc:
        rate = None
        errors.append(str(exc))
    return LabelReport(
        outcomes=final,
        series=series,
        eligible_count=eligible,
        par_count=pars,
        par_series_count=len(series),
        par_rate=rate,
        per_cohort_rates=_rates(final, series, "cohort"),
        per_facility_rates=_rates(final, series, "facility"),
        audit=audit,
        errors=errors,
    )


def label(data, tables: RuleTables | None = None, config: ParConfig | None = None, overrides=None):
    """Run the full labeling pipeline; returns (LabelReport, timelines)."""
    config = config or ParConfig()
    tables = tables if tables is not None else default_rule_tables()
    if isinstance(data, Dataset) or (isinstance(data, (list, tuple)) and (not data or not isinstance(data[0], PatientTimeline))):
        timelines = build_timelines(data)
    else:
        timelines = list(data)
    tables.validate(config)
    roles = classify_roles(timelines, tables, config)
    ex = apply_exclusions(roles, tables, config)
    outcomes = mark_relations(ex, tables, config)
    ov = apply_overrides(outcomes, overrides or [])
    series_outcomes = [replace(o) for o in ov.outcomes]
    # series are built after non-PAR readmissions are settled, so rebuild on a copy
    series = build_series([o for o in series_outcomes if o.in_context], ex.records)
    ids_in_series = {rid for s in series for rid in s.par_record_ids}
    for o in series_outcomes:
        if o.record_id not in ids_in_series:
            o.series_id = None
    report = reclassify_and_rate(series_outcomes, series, ex, config, ex.audit + ov.audit)
    strays = [o for o in report.outcomes if o.is_par and o.series_id is None]
    if strays:
        raise AssertionError("PAR outside every series")
    report.audit.append(("VII", "series", tuple(s.series_id for s in series)))
    report.errors = ov.errors + report.errors
    report.warnings = ov.warnings
    report.table_versions = dict(tables.versions)
    return report, timelines
