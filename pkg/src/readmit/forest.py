"""Phase-type survival forest: subject bootstrap, WIC-grown trees, voting,
out-of-bag error and permutation importance."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .frame import ModelFrame, SchemaMismatchError, VariableSpec, schema_fingerprint
from .phase_type import EmConfig, survival
from .splitting import NodeData, NodeFit, SplitSettings, best_split, degrees_of_freedom, fit_node

FORMAT_VERSION = 1


@dataclass
class ForestConfig:
    n_trees: int = 100
    vars_per_split: int = 5
    m: int = 1
    r: int = 1
    class_weights: dict = field(default_factory=lambda: {"no_readmission": 1.0, "par": 1.0})
    weight_splits: bool = True  # class weights in node likelihoods and leaf classes
    weight_votes: bool = True  # class weights in the vote fraction
    min_node_size: int | None = None
    max_depth: int | None = None
    cutpoint_strategy: str = "search"
    max_cutpoints: int = 32
    fixed_cutpoints: dict | None = None
    decision_threshold: float = 0.5
    master_seed: int = 0
    bootstrap_size: int | None = None
    vote_pooling: str = "patient"  # patient | record
    child_em_iterations: int = 40
    child_em_tolerance: float = 1e-3
    node_em_iterations: int = 100
    node_em_tolerance: float = 1e-4
    horizon: float = 30.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.vars_per_split < 1:
            raise ValueError("vars_per_split must be >= 1")
        w0, w1 = self.w0, self.w1
        if not (w0 > 0 and w1 > 0):
            raise ValueError("class weights must be positive")
        if not 0 < self.decision_threshold < 1:
            raise ValueError("decision_threshold must lie in (0, 1)")
        if self.vote_pooling not in ("patient", "record"):
            raise ValueError("vote_pooling must be 'patient' or 'record'")
        if self.cutpoint_strategy not in ("search", "fixed"):
            raise ValueError("cutpoint_strategy must be 'search' or 'fixed'")

    @property
    def w0(self) -> float:
        return float(self.class_weights["no_readmission"])

    @property
    def w1(self) -> float:
        return float(self.class_weights["par"])

    @property
    def d(self) -> int:
        return degrees_of_freedom(self.m, self.r)

    @property
    def min_size(self) -> int:
        return self.min_node_size if self.min_node_size is not None else 2 * (self.d + 2)

    def split_settings(self) -> SplitSettings:
        return SplitSettings(
            m=self.m,
            r=self.r,
            strategy=self.cutpoint_strategy,
            max_cutpoints=self.max_cutpoints,
            fixed_cutpoints=self.fixed_cutpoints,
            em=EmConfig(max_iterations=self.child_em_iterations, ll_tolerance=self.child_em_tolerance),
            parent_em=EmConfig(max_iterations=self.node_em_iterations, ll_tolerance=self.node_em_tolerance),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ForestConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# bootstrap


def patient_index(patient_ids) -> tuple:
    """Sorted distinct patients and each row's position in that list."""
    uniq, inv = np.unique(np.asarray(patient_ids, dtype=str), return_inverse=True)
    return uniq, inv


def subject_bootstrap(n_patients: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw patients with replacement; returns the in-bag count per patient.

    Rows inherit their patient's count, so a patient's replicates are
    either all in-bag or all out-of-bag.
    """
    if n_patients < 1:
        raise ValueError("need at least one patient")
    S = n_patients if size is None else int(size)
    draws = rng.integers(0, n_patients, size=S)
    return np.bincount(draws, minlength=n_patients)


def tree_seeds(master_seed: int, n_trees: int) -> list:
    return np.random.SeedSequence(master_seed).spawn(n_trees)


# ---------------------------------------------------------------------------
# trees


@dataclass
class SurvivalTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: list
    kind: list
    threshold: list
    subset: list
    left: list
    right: list
    tally: list  # (no_readmission, par) multiplicity counts
    leaf_class: list
    fits: list
    inbag: list  # in-bag count for each patient in the forest's patient list
    seed: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaves_of(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0], dtype=int)
        idx = np.arange(X.shape[0])
        stack = [(0, idx)]
        feat = self.feature
        while stack:
            node, rows = stack.pop()
            f = feat[node]
            if f < 0:
                out[rows] = node
                continue
            x = X[rows, f]
            if self.kind[node] == "binary_threshold":
                go = x <= self.threshold[node]
            else:
                go = np.isin(x, np.asarray(self.subset[node], dtype=float))
            stack.append((self.left[node], rows[go]))
            stack.append((self.right[node], rows[~go]))
        return out

    def classify(self, X: np.ndarray) -> np.ndarray:
        lc = np.asarray(self.leaf_class, dtype=int)
        return lc[self.leaves_of(X)]

    def leaf_probability(self, X: np.ndarray, horizon: float) -> np.ndarray:
        """P(T <= horizon) from each row's leaf phase-type model."""
        leaves = self.leaves_of(X)
        cache = {}
        out = np.empty(X.shape[0])
        for i, node in enumerate(leaves):
            if node not in cache:
                cache[node] = 1.0 - float(survival(self.fits[node].ph, horizon))
            out[i] = cache[node]
        return out

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, dep = stack.pop()
            best = max(best, dep)
            if self.feature[node] >= 0:
                stack.append((self.left[node], dep + 1))
                stack.append((self.right[node], dep + 1))
        return best

    def to_dict(self) -> dict:
        return {
            "feature": list(self.feature),
            "kind": list(self.kind),
            "threshold": list(self.threshold),
            "subset": [list(s) if s is not None else None for s in self.subset],
            "left": list(self.left),
            "right": list(self.right),
            "tally": [list(t) for t in self.tally],
            "leaf_class": list(self.leaf_class),
            "fits": [f.to_dict() for f in self.fits],
            "inbag": list(self.inbag),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SurvivalTree:
        return cls(
            feature=[int(x) for x in d["feature"]],
            kind=list(d["kind"]),
            threshold=[None if x is None else float(x) for x in d["threshold"]],
            subset=[tuple(s) if s is not None else None for s in d["subset"]],
            left=[int(x) for x in d["left"]],
            right=[int(x) for x in d["right"]],
            tally=[tuple(float(v) for v in t) for t in d["tally"]],
            leaf_class=[int(x) for x in d["leaf_class"]],
            fits=[NodeFit.from_dict(f) for f in d["fits"]],
            inbag=[int(x) for x in d["inbag"]],
            seed=int(d["seed"]),
        )


def _variable_triples(schema) -> list:
    return [(j, v.name, v.kind) for j, v in enumerate(schema)]


def grow_tree(frame: ModelFrame, config: ForestConfig, seed_seq, patient_rows=None, tree_index: int = 0,
              root_init=None):
    """Grow one unpruned tree on a subject bootstrap drawn from ``seed_seq``.

    ``root_init`` (a CoxianPH) warm-starts the root fit; :func:`train`
    passes the fit on the full frame so each root needs few EM sweeps.
    """
    rng = np.random.default_rng(seed_seq)
    if patient_rows is None:
        patient_rows = patient_index(frame.patient_ids)
    uniq, inv = patient_rows
    counts = subject_bootstrap(uniq.size, rng, config.bootstrap_size)
    mult_all = counts[inv].astype(float)
    keep = mult_all > 0
    settings = config.split_settings()
    variables = _variable_triples(frame.schema)
    v = len(variables)
    if config.vars_per_split > v:
        raise ValueError(f"vars_per_split={config.vars_per_split} exceeds the {v} available variables")
    ev = frame.events[keep]
    if config.weight_splits:
        weight = np.where(ev, config.w1, config.w0)
    else:
        weight = np.ones(ev.size)
    root = NodeData(frame.X[keep], frame.times[keep], ev, mult_all[keep], weight)

    tree = SurvivalTree([], [], [], [], [], [], [], [], [], counts.tolist(), tree_index)

    def new_node(node: NodeData, fit: NodeFit) -> int:
        tree.feature.append(-1)
        tree.kind.append(None)
        tree.threshold.append(None)
        tree.subset.append(None)
        tree.left.append(-1)
        tree.right.append(-1)
        n_par = float(node.mult[node.events].sum())
        n_no = float(node.mult[~node.events].sum())
        tree.tally.append((n_no, n_par))
        if config.weight_splits:
            cls = int(config.w1 * n_par > config.w0 * n_no)
        else:
            cls = int(n_par > n_no)
        tree.leaf_class.append(cls)
        tree.fits.append(fit)
        return len(tree.feature) - 1

    root_fit = fit_node(root, settings, init=root_init)
    stack = [(new_node(root, root_fit), root, root_fit, 0)]
    while stack:
        idx, node, fit, depth = stack.pop()
        if node.N < config.min_size or (config.max_depth is not None and depth >= config.max_depth):
            continue
        chosen = sorted(rng.choice(v, size=config.vars_per_split, replace=False).tolist())
        if depth > 0:
            # child fits come from the short split-search EM; converge them
            # before they serve as the reference for their own children
            fit = fit_node(node, settings, init=fit.ph)
            tree.fits[idx] = fit
        res = best_split(node, [variables[j] for j in chosen], settings, parent=fit)
        if res is None:
            continue
        c = res.candidate
        tree.feature[idx] = c.variable
        tree.kind[idx] = c.kind
        tree.threshold[idx] = c.threshold
        tree.subset[idx] = c.subset
        lnode = node.take(res.left_mask)
        rnode = node.take(~res.left_mask)
        li = new_node(lnode, res.left)
        ri = new_node(rnode, res.right)
        tree.left[idx] = li
        tree.right[idx] = ri
        # right pushed first so the left subtree is expanded first
        stack.append((ri, rnode, res.right, depth + 1))
        stack.append((li, lnode, res.left, depth + 1))
    return tree


# ---------------------------------------------------------------------------
# forest


@dataclass
class SurvivalForest:
    trees: list
    config: ForestConfig
    schema: tuple
    patients: tuple
    fill_values: dict = field(default_factory=dict)
    importance: list | None = None

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.schema)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "schema": [v.to_dict() for v in self.schema],
            "fingerprint": self.fingerprint,
            "patients": list(self.patients),
            "fill_values": self.fill_values,
            "trees": [t.to_dict() for t in self.trees],
            "importance": self.importance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SurvivalForest:
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported forest format {d.get('format_version')!r}")
        schema = tuple(VariableSpec.from_dict(v) for v in d["schema"])
        f = cls(
            trees=[SurvivalTree.from_dict(t) for t in d["trees"]],
            config=ForestConfig.from_dict(d["config"]),
            schema=schema,
            patients=tuple(d["patients"]),
            fill_values=dict(d.get("fill_values", {})),
            importance=d.get("importance"),
        )
        if f.fingerprint != d["fingerprint"]:
            raise SchemaMismatchError("stored fingerprint does not match stored schema")
        return f

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> SurvivalForest:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> SurvivalForest:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _grow_job(args):
    frame, config, seed_seq, b, init = args
    return grow_tree(frame, config, seed_seq, tree_index=b, root_init=init)


def _frame_node(frame: ModelFrame, config: ForestConfig) -> NodeData:
    ev = frame.events
    weight = np.where(ev, config.w1, config.w0) if config.weight_splits else np.ones(ev.size)
    return NodeData(frame.X, frame.times, ev, np.ones(ev.size), weight)


def train(frame: ModelFrame, config: ForestConfig, n_jobs: int = 1) -> SurvivalForest:
    """Grow ``config.n_trees`` trees; output does not depend on ``n_jobs``."""
    if frame.n == 0:
        raise ValueError("cannot train on an empty frame")
    if np.isnan(frame.X).any():
        raise ValueError("frame has missing values; fill them before training")
    if config.vars_per_split > len(frame.schema):
        raise ValueError(f"vars_per_split={config.vars_per_split} exceeds {len(frame.schema)} variables")
    uniq, inv = patient_index(frame.patient_ids)
    seeds = tree_seeds(config.master_seed, config.n_trees)
    init = fit_node(_frame_node(frame, config), config.split_settings()).ph
    if n_jobs <= 1:
        rows = (uniq, inv)
        trees = [grow_tree(frame, config, s, rows, b, init) for b, s in enumerate(seeds)]
    else:
        jobs = [(frame, config, s, b, init) for b, s in enumerate(seeds)]
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            trees = list(ex.map(_grow_job, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    return SurvivalForest(trees, config, tuple(frame.schema), tuple(uniq.tolist()), dict(frame.fill_values))


def _check_schema(forest: SurvivalForest, frame: ModelFrame):
    if forest.fingerprint != frame.fingerprint:
        raise SchemaMismatchError(
            f"model schema {forest.fingerprint} does not match data schema {frame.fingerprint}"
        )


def vote_matrix(forest: SurvivalForest, X: np.ndarray) -> np.ndarray:
    """Tree-by-row matrix of hard class votes."""
    return np.stack([t.classify(X) for t in forest.trees]) if forest.trees else np.zeros((0, X.shape[0]))


def _fraction(par_votes, all_votes, config: ForestConfig):
    no_votes = all_votes - par_votes
    if config.weight_votes:
        num = config.w1 * par_votes
        den = num + config.w0 * no_votes
    else:
        num, den = par_votes, all_votes
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def _pool(frame: ModelFrame, par_votes, all_votes, pooling):
    if pooling == "record":
        return par_votes, all_votes
    _, inv = patient_index(frame.patient_ids)
    pp = np.bincount(inv, weights=par_votes)
    pa = np.bincount(inv, weights=all_votes)
    return pp[inv], pa[inv]


@dataclass
class Predictions:
    record_ids: np.ndarray
    patient_ids: np.ndarray
    vote_fraction: np.ndarray
    predicted: np.ndarray
    probability: np.ndarray | None = None
    n_votes: np.ndarray | None = None


def predict(forest: SurvivalForest, frame: ModelFrame, pooling: str | None = None,
            with_probability: bool = False) -> Predictions:
    """Score every row; votes pool over trees (and patient replicates)."""
    _check_schema(forest, frame)
    cfg = forest.config
    pooling = pooling or cfg.vote_pooling
    V = vote_matrix(forest, frame.X)
    par = V.sum(axis=0).astype(float)
    allv = np.full(frame.n, float(len(forest.trees)))
    par, allv = _pool(frame, par, allv, pooling)
    frac = _fraction(par, allv, cfg)
    prob = None
    if with_probability:
        prob = np.mean([t.leaf_probability(frame.X, cfg.horizon) for t in forest.trees], axis=0)
    return Predictions(
        frame.record_ids,
        frame.patient_ids,
        frac,
        (frac >= cfg.decision_threshold).astype(int),
        prob,
        allv,
    )


def oob_mask(forest: SurvivalForest, frame: ModelFrame) -> np.ndarray:
    """Tree-by-row boolean matrix: True where the row's patient is out of bag."""
    pos = {p: i for i, p in enumerate(forest.patients)}
    idx = np.array([pos.get(str(p), -1) for p in frame.patient_ids])
    counts = np.array([t.inbag for t in forest.trees])
    out = np.ones((len(forest.trees), frame.n), dtype=bool)
    known = idx >= 0
    out[:, known] = counts[:, idx[known]] == 0
    return out


def oob_predict(forest: SurvivalForest, frame: ModelFrame, pooling: str | None = None) -> Predictions:
    """Scores using only trees for which each patient was out of bag."""
    _check_schema(forest, frame)
    cfg = forest.config
    pooling = pooling or cfg.vote_pooling
    V = vote_matrix(forest, frame.X)
    M = oob_mask(forest, frame)
    par = (V * M).sum(axis=0).astype(float)
    allv = M.sum(axis=0).astype(float)
    par, allv = _pool(frame, par, allv, pooling)
    frac = _fraction(par, allv, cfg)
    pred = np.where(np.isnan(frac), -1, (frac >= cfg.decision_threshold).astype(int))
    return Predictions(frame.record_ids, frame.patient_ids, frac, pred, None, allv)


def oob_probability(forest: SurvivalForest, frame: ModelFrame) -> np.ndarray:
    """Mean leaf P(T <= horizon) over the trees for which a row is out of bag."""
    _check_schema(forest, frame)
    M = oob_mask(forest, frame)
    total = np.zeros(frame.n)
    for b, tree in enumerate(forest.trees):
        rows = np.flatnonzero(M[b])
        if rows.size:
            total[rows] += tree.leaf_probability(frame.X[rows], forest.config.horizon)
    k = M.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(k > 0, total / np.maximum(k, 1), np.nan)


@dataclass
class OobError:
    overall: float | None
    no_readmission: float | None
    par: float | None
    n_scored: int
    n_unscored: int

    def as_tuple(self):
        return (self.overall, self.no_readmission, self.par)

    def to_dict(self):
        return asdict(self)


def _rate(x, n):
    return float(x) / n if n else None


def oob_error(forest: SurvivalForest, frame: ModelFrame, pooling: str | None = None) -> OobError:
    """Overall and per-class out-of-bag misclassification rates."""
    p = oob_predict(forest, frame, pooling)
    scored = p.predicted >= 0
    y = frame.labels[scored]
    yhat = p.predicted[scored]
    wrong = y != yhat
    return OobError(
        overall=_rate(wrong.sum(), y.size),
        no_readmission=_rate(wrong[y == 0].sum(), int((y == 0).sum())),
        par=_rate(wrong[y == 1].sum(), int((y == 1).sum())),
        n_scored=int(scored.sum()),
        n_unscored=int((~scored).sum()),
    )


@dataclass
class ImportanceRow:
    variable: str
    raw_score: float
    z_score: float
    significance: float

    def to_dict(self):
        return asdict(self)


def variable_importance(forest: SurvivalForest, frame: ModelFrame, seed: int | None = None) -> list:
    """Permutation importance on out-of-bag rows, tree by tree.

    For each tree and variable the variable is shuffled among the tree's
    OOB rows; the raw score is the mean increase in OOB misclassification
    (percentage points), Z divides it by its tree-wise standard error and
    the significance is the upper-tail normal probability of Z.
    """
    _check_schema(forest, frame)
    seed = forest.config.master_seed if seed is None else seed
    M = oob_mask(forest, frame)
    y = frame.labels
    v = len(frame.schema)
    seeds = np.random.SeedSequence([seed, 7]).spawn(len(forest.trees))
    deltas = np.full((len(forest.trees), v), np.nan)
    for b, tree in enumerate(forest.trees):
        rows = np.flatnonzero(M[b])
        if rows.size == 0:
            continue
        rng = np.random.default_rng(seeds[b])
        Xo = frame.X[rows]
        base = np.mean(tree.classify(Xo) != y[rows])
        used = set(f for f in tree.feature if f >= 0)
        for j in range(v):
            perm = rng.permutation(rows.size)
            if j not in used:
                deltas[b, j] = 0.0
                continue
            Xp = Xo.copy()
            Xp[:, j] = Xo[perm, j]
            deltas[b, j] = np.mean(tree.classify(Xp) != y[rows]) - base
    out = []
    for j, spec in enumerate(frame.schema):
        dj = deltas[:, j]
        dj = dj[~np.isnan(dj)] * 100.0
        if dj.size == 0:
            out.append(ImportanceRow(spec.name, 0.0, 0.0, 0.5))
            continue
        raw = float(dj.mean())
        se = float(dj.std(ddof=1) / math.sqrt(dj.size)) if dj.size > 1 else 0.0
        if se > 0:
            z = raw / se
        else:
            z = 0.0 if raw == 0 else math.copysign(math.inf, raw)
        out.append(ImportanceRow(spec.name, raw, z, float(norm.sf(z))))
    out.sort(key=lambda r: (-r.raw_score, r.variable))
    return out
