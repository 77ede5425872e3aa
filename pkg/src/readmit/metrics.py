"""Discrimination, classification and calibration metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric needs both classes (or a nonzero denominator)."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, predicted, labels) -> ConfusionCounts:
        p = np.asarray(predicted).astype(bool)
        y = np.asarray(labels).astype(bool)
        return cls(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y)))


def _ratio(a, b):
    return a / b if b else None


def classification_metrics(counts: ConfusionCounts, scores=None, labels=None) -> dict:
    """Confusion-matrix summaries with PAR as the positive class.

    A metric whose denominator is zero is reported as None.  MSE needs the
    probability scores and their labels.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    ppv = _ratio(tp, tp + fp)
    npv = _ratio(tn, tn + fn)
    f = None
    if sens is not None and ppv is not None and sens + ppv > 0:
        f = 2 * sens * ppv / (sens + ppv)
    denom = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = (tp * tn - fp * fn) / denom if denom > 0 else None
    mse = None
    if scores is not None:
        s = np.asarray(scores, dtype=float)
        y = np.asarray(labels, dtype=float)
        if s.size:
            mse = float(np.mean((s - y) ** 2))
    return {
        "sensitivity": sens,
        "specificity": spec,
        "ppv": ppv,
        "npv": npv,
        "f_score": f,
        "mcc": mcc,
        "mse": mse,
        "accuracy": _ratio(tp + tn, counts.total),
    }


def _check_two_class(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise UndefinedMetricError("both classes must be present")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score of a positive > score of a negative), ties half."""
    s, y = _check_two_class(scores, labels)
    r = rankdata(s)
    n1 = int(y.sum())
    n0 = y.size - n1
    return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_curve(scores, labels) -> list:
    """(fpr, tpr) points from (0, 0) to (1, 1), one step per distinct score."""
    s, y = _check_two_class(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    P, N = y.sum(), (~y).sum()
    pts = [(0.0, 0.0)] + [(float(f / N), float(t / P)) for f, t in zip(fps, tps)]
    return pts


def trapezoid_area(points) -> float:
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def threshold_sweep(scores, labels, thresholds) -> list:
    """Metrics at each threshold (score >= threshold predicts PAR)."""
    s = np.asarray(scores, dtype=float)
    out = []
    for t in thresholds:
        m = classification_metrics(ConfusionCounts.from_predictions(s >= t, labels))
        out.append({"threshold": float(t), **m})
    return out


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationRow:
    decile: int
    sample_size: int
    predicted_par: int
    observed_par: int
    op_ratio: float | None
    lower: float
    upper: float

    def to_dict(self):
        return asdict(self)


def op_ratio(observed: int, predicted: int) -> float | None:
    return observed / predicted if predicted > 0 else None


def _bin_index(s, n_bins, binning, edges):
    if binning == "fixed":
        if edges is None or len(edges) != n_bins + 1:
            raise ValueError("fixed binning needs n_bins + 1 edges")
        e = np.asarray(edges, dtype=float)
    elif binning == "equal_width":
        lo, hi = (float(s.min()), float(s.max())) if s.size else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1e-12
        e = np.linspace(lo, hi, n_bins + 1)
    elif binning == "equal_count":
        # rank-based deciles; tied scores share the bin of their first rank
        if s.size == 0:
            return np.zeros(0, dtype=int), np.linspace(0, 1, n_bins + 1)
        r = rankdata(s, method="min") - 1
        idx = np.minimum((r * n_bins) // s.size, n_bins - 1).astype(int)
        e = np.array([s[idx == b].min() if np.any(idx == b) else np.nan for b in range(n_bins)] + [s.max()])
        return idx, e
    else:
        raise ValueError(f"unknown binning {binning!r}")
    idx = np.clip(np.searchsorted(e, s, side="right") - 1, 0, n_bins - 1)
    return idx, e


def calibration_table(scores, labels, n_bins: int = 10, binning: str = "equal_width", edges=None) -> list:
    """Rows ordered from lowest to highest predicted risk.

    Predicted PAR per bin is the rounded sum of scores; observed is the
    count of positive labels.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.size and (s.min() < 0 or s.max() > 1):
        raise ValueError("scores must lie in [0, 1]")
    idx, e = _bin_index(s, n_bins, binning, edges)
    rows = []
    for b in range(n_bins):
        m = idx == b
        pred = int(round(float(s[m].sum())))
        obs = int(y[m].sum())
        lo = float(e[b]) if not np.isnan(e[b]) else math.nan
        hi = float(e[b + 1]) if b + 1 < len(e) else math.nan
        rows.append(CalibrationRow(b + 1, int(m.sum()), pred, obs, op_ratio(obs, pred), lo, hi))
    return rows


def calibration_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["decile", "n", "predicted", "observed", "op_ratio"])
    for r in rows:
        w.writerow([r.decile, r.sample_size, r.predicted_par, r.observed_par,
                    "" if r.op_ratio is None else f"{r.op_ratio:.3f}"])
    return buf.getvalue()


def roc_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr"])
    for f, t in points:
        w.writerow([repr(f), repr(t)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# split-sample validation


def optimism_corrected(train_c: float, test_c: float) -> dict:
    optimism = train_c - test_c
    return {"train_c": train_c, "test_c": test_c, "optimism": optimism, "corrected_c": train_c - optimism}


def patient_stratified_split(patient_ids, labels, fraction: float, rng) -> np.ndarray:
    """Boolean training mask; patients are kept whole and stratified by any-event."""
    pids = np.asarray(patient_ids)
    y = np.asarray(labels).astype(bool)
    uniq, inv = np.unique(pids, return_inverse=True)
    pos = np.zeros(uniq.size, dtype=bool)
    np.logical_or.at(pos, inv, y)
    train_p = np.zeros(uniq.size, dtype=bool)
    for stratum in (np.flatnonzero(pos), np.flatnonzero(~pos)):
        k = int(round(fraction * stratum.size))
        chosen = rng.choice(stratum, size=k, replace=False) if k else np.array([], dtype=int)
        train_p[chosen] = True
    return train_p[inv]


def split_sample_validation(frame, trainer, n_repeats: int = 7, split: float = 0.5, seed: int = 0) -> dict:
    """Repeated split-half validation with optimism correction.

    ``trainer(train_frame, repeat_seed)`` returns a scorer mapping a frame
    to PAR scores.  Each repeat trains on one half and scores both halves.
    """
    if not 0 < split < 1:
        raise ValueError("split must lie in (0, 1)")
    seeds = np.random.SeedSequence(seed).spawn(n_repeats)
    train_cs, test_cs, repeats = [], [], []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        mask = patient_stratified_split(frame.patient_ids, frame.labels, split, rng)
        tr, te = frame.subset(mask), frame.subset(~mask)
        for part, name in ((tr, "training"), (te, "testing")):
            if part.n == 0 or part.labels.all() or not part.labels.any():
                raise UndefinedMetricError(f"degenerate split in repeat {i}: {name} half lacks a class")
        scorer = trainer(tr, int(ss.generate_state(1)[0]))
        c_tr = auroc(scorer(tr), tr.labels)
        c_te = auroc(scorer(te), te.labels)
        train_cs.append(c_tr)
        test_cs.append(c_te)
        repeats.append({"repeat": i, "train_c": c_tr, "test_c": c_te, "n_train": tr.n, "n_test": te.n})
    out = optimism_corrected(float(np.mean(train_cs)), float(np.mean(test_cs)))
    out["repeats"] = repeats
    return out
