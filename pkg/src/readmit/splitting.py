"""Node fits, the weighted average information criterion and split search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .phase_type import (
    _MAX_TERMS,
    CoxianPH,
    DegenerateLikelihood,
    EmConfig,
    EStepKernel,
    ObservationSet,
    _from_rates,
    _poisson_weights,
    em_iterate,
    initial_model,
    poisson_truncation,
)

# Published cutpoints for the continuous covariates used in the baseline model.
PUBLISHED_CUTPOINTS = {
    "age": 68.0,
    "length_of_stay": 5.0,
    "can_score": 66.0,
    "sequence": 3.0,
    "charlson_index": 4.5,
}


class InsufficientDataError(ValueError):
    """Raised when N <= d + 1 and the criterion is undefined."""


def degrees_of_freedom(m: int, r: int) -> int:
    return 2 * (m + r) - 1


def wic(L: float, d: int, N: float) -> float:
    """Weighted average information criterion of a fit with L, d, N."""
    if not N > d + 1:
        raise InsufficientDataError(f"need N > d + 1 (N={N}, d={d})")
    logN = math.log(N)
    D = N - (d + 1)
    num = d * (((logN - 1) * logN) * D**2 + 2 * N * (N + (d + 1)))
    den = (2 * N + (logN * D)) * D
    return -2 * L + d + num / den


@dataclass(frozen=True)
class NodeFit:
    ph: CoxianPH
    L: float
    d: int
    N: float
    wic: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "ph": self.ph.to_dict(),
            "L": self.L,
            "d": self.d,
            "N": self.N,
            "wic": self.wic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NodeFit:
        return cls(
            ph=CoxianPH.from_dict(d["ph"]),
            L=float(d["L"]),
            d=int(d["d"]),
            N=float(d["N"]),
            wic=float(d["wic"]),
        )


def split_wic(children) -> float:
    return float(sum(c.wic for c in children))


def information_gain(parent: NodeFit, children) -> float:
    """Parent WIC minus summed child WIC; positive means the split helps."""
    return parent.wic - split_wic(children)


@dataclass(frozen=True)
class SplitCandidate:
    variable: int
    name: str
    kind: str  # binary_threshold | binary_category_subset
    threshold: float | None = None
    subset: tuple | None = None

    def goes_left(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "binary_threshold":
            return x <= self.threshold
        return np.isin(x, np.asarray(self.subset, dtype=float))

    def sort_key(self):
        first = self.threshold if self.threshold is not None else min(self.subset)
        return (self.variable, first, self.subset or ())


@dataclass
class NodeData:
    """Observations at a tree node.

    ``mult`` is the bootstrap multiplicity of each row and ``weight`` the
    class weight applied to its log-likelihood term.  N counts rows with
    multiplicity; the likelihood uses ``mult * weight``.
    """

    X: np.ndarray
    times: np.ndarray
    events: np.ndarray
    mult: np.ndarray
    weight: np.ndarray

    @property
    def N(self) -> float:
        return float(self.mult.sum())

    def take(self, mask: np.ndarray) -> NodeData:
        return NodeData(self.X[mask], self.times[mask], self.events[mask], self.mult[mask], self.weight[mask])


@dataclass
class SplitSettings:
    m: int = 1
    r: int = 1
    strategy: str = "search"  # search | fixed
    max_cutpoints: int = 32
    fixed_cutpoints: dict | None = None
    max_exhaustive_levels: int = 4
    em: EmConfig | None = None  # config for split-search child fits
    parent_em: EmConfig | None = None
    screen_iterations: int = 3  # 0 refines every candidate fully
    refine_top: int = 4

    @property
    def d(self) -> int:
        return degrees_of_freedom(self.m, self.r)

    def child_em(self) -> EmConfig:
        return self.em or EmConfig(max_iterations=40, ll_tolerance=1e-3)

    def node_em(self) -> EmConfig:
        return self.parent_em or EmConfig(max_iterations=100, ll_tolerance=1e-4)


class _NodeKernel:
    """Shared uniformization cache for a node and its candidate children."""

    def __init__(self, node: NodeData):
        w = node.mult * node.weight
        ev = node.events
        self.uc, self.ic = np.unique(node.times[ev], return_inverse=True)
        self.us, self.is_ = np.unique(node.times[~ev], return_inverse=True)
        self.ev = ev
        self.base = EStepKernel(
            self.uc,
            np.bincount(self.ic, weights=w[ev], minlength=self.uc.size),
            self.us,
            np.bincount(self.is_, weights=w[~ev], minlength=self.us.size),
        )

    def for_mask(self, node: NodeData, mask: np.ndarray) -> EStepKernel:
        w = node.mult * node.weight
        ev = self.ev
        wc = np.bincount(self.ic[mask[ev]], weights=w[ev & mask], minlength=self.uc.size)
        ws = np.bincount(self.is_[mask[~ev]], weights=w[~ev & mask], minlength=self.us.size)
        return self.base.subset(wc, ws)


def _observations(node: NodeData) -> ObservationSet:
    return ObservationSet(node.times, node.events, node.mult * node.weight)


def fit_node(node: NodeData, settings: SplitSettings, init: CoxianPH | None = None,
             kernel: EStepKernel | None = None, config: EmConfig | None = None) -> NodeFit:
    """Fit the node's PH model by EM and wrap it with its criterion value."""
    config = config or settings.node_em()
    if kernel is None:
        kernel = _NodeKernel(node).base
    if init is None:
        init = initial_model(_observations(node), settings.m, settings.r, EmConfig())
    ph, diag = em_iterate(kernel, init, config)
    L = diag.log_likelihood
    d = settings.d
    N = node.N
    # too few rows for the criterion: the node can only be a leaf
    if isinstance(L, DegenerateLikelihood) or not N > d + 1:
        value = math.inf
    else:
        value = wic(L, d, N)
    return NodeFit(ph=ph, L=float(L), d=d, N=N, wic=value, iterations=diag.iterations)


def candidate_splits(x: np.ndarray, var_index: int, name: str, kind: str, settings: SplitSettings,
                     events: np.ndarray | None = None, weights: np.ndarray | None = None) -> list:
    """Admissible binary partitions of one covariate at a node.

    ``kind`` is ``continuous``, ``binary`` or ``categorical`` (integer codes).
    """
    values = np.unique(x)
    if values.size < 2:
        return []
    if kind == "continuous":
        fixed = (settings.fixed_cutpoints or PUBLISHED_CUTPOINTS) if settings.strategy == "fixed" else None
        if fixed is not None and name in fixed:
            c = float(fixed[name])
            if values[0] <= c < values[-1]:
                return [SplitCandidate(var_index, name, "binary_threshold", threshold=c)]
            return []
        mids = (values[:-1] + values[1:]) / 2.0
        if mids.size > settings.max_cutpoints:
            qs = np.quantile(x, np.linspace(0, 1, settings.max_cutpoints + 2)[1:-1])
            # snap each quantile to the nearest midpoint so partitions stay distinct
            mids = np.unique(mids[np.clip(np.searchsorted(mids, qs), 0, mids.size - 1)])
        return [SplitCandidate(var_index, name, "binary_threshold", threshold=float(c)) for c in mids]
    if kind == "binary" or values.size == 2:
        return [SplitCandidate(var_index, name, "binary_category_subset", subset=(float(values[0]),))]
    levels = [float(v) for v in values]
    if len(levels) <= settings.max_exhaustive_levels:
        out = []
        rest = levels[1:]
        # subsets containing the first level enumerate each bipartition once
        for k in range(0, len(rest)):
            for combo in combinations(rest, k):
                subset = (levels[0],) + combo
                out.append(SplitCandidate(var_index, name, "binary_category_subset", subset=tuple(sorted(subset))))
        return out
    # order levels by weighted event rate and take prefixes
    rates = []
    for v in levels:
        sel = x == v
        w = weights[sel] if weights is not None else np.ones(sel.sum())
        e = events[sel] if events is not None else np.zeros(sel.sum())
        rates.append(float(np.sum(w * e) / max(np.sum(w), 1e-300)))
    order = [levels[i] for i in np.argsort(rates, kind="stable")]
    return [
        SplitCandidate(var_index, name, "binary_category_subset", subset=tuple(sorted(order[: k + 1])))
        for k in range(len(order) - 1)
    ]


class BatchEM:
    """EM for many Coxian models sharing one time grid.

    Every model has its own weight vector over the grid's distinct complete
    and censored times.  One power stack of a batched block generator per
    iteration gives all models' E-steps, so the per-model cost is a slice
    of a single matrix product.  Models converge (and freeze) individually.
    """

    def __init__(self, uc, us, Wc, Ws, m, r, onward, exits, config: EmConfig, tol=1e-13):
        self.uc, self.us = uc, us
        self.Wc, self.Ws = np.atleast_2d(Wc), np.atleast_2d(Ws)
        self.m, self.r = m, r
        self.p = m + r
        self.onward = np.array(onward, dtype=float).reshape(-1, self.p - 1)
        self.exits = np.array(exits, dtype=float).reshape(-1, self.p)
        self.structural = self.exits[0] > 0
        self.config = config
        self.tol = tol
        M = self.onward.shape[0]
        self.ll = np.full(M, -np.inf)
        self.iterations = np.zeros(M, dtype=int)
        self.active = np.ones(M, dtype=bool)
        self.degenerate = np.zeros(M, dtype=bool)
        self.theta = None
        tmax = max(float(uc.max()) if uc.size else 0.0, float(us.max()) if us.size else 0.0)
        self.tmax = tmax

    def _rebuild(self, theta):
        self.theta = theta
        self.K = poisson_truncation(theta * self.tmax, self.tol)
        if self.K > _MAX_TERMS:
            raise OverflowError("uniformization truncation too large for batched EM")
        self.Pc = _poisson_weights(theta * self.uc, self.K)
        self.Ps = _poisson_weights(theta * self.us, self.K)

    def _estep(self, idx):
        p = self.p
        on = self.onward[idx]
        ex = self.exits[idx]
        n = idx.size
        maxrate = float(np.max(np.concatenate([on, np.zeros((n, 1))], axis=1) + ex))
        if self.theta is None or maxrate > self.theta:
            self._rebuild(1.5 * maxrate)
        B = np.zeros((n, 3 * p, 3 * p))
        diag = -(np.concatenate([on, np.zeros((n, 1))], axis=1) + ex)
        ar = np.arange(p)
        for off in (0, p, 2 * p):
            B[:, off + ar, off + ar] = diag
            if p > 1:
                B[:, off + ar[:-1], off + ar[1:]] = on
        B[:, :p, p] = ex
        B[:, :p, 2 * p] = 1.0
        P = B / self.theta
        P[:, np.arange(3 * p), np.arange(3 * p)] += 1.0
        K = self.K
        stack = np.empty((K + 1, n, 3 * p, 3 * p))
        stack[0] = np.eye(3 * p)
        filled = 1
        while filled <= K:
            take = min(filled, K + 1 - filled)
            step = stack[filled - 1] @ P
            stack[filled: filled + take] = stack[:take] @ step
            filled += take
        sub = ar[:-1]
        ll = np.zeros(n)
        Z = np.zeros((n, p))
        Non = np.zeros((n, p - 1))
        Nex = np.zeros((n, p))
        bad = np.zeros(n, dtype=bool)
        for W, P_w, T, off in ((self.Wc[idx], self.Pc, self.uc, p), (self.Ws[idx], self.Ps, self.us, 2 * p)):
            if T.size == 0:
                continue
            rows = np.concatenate([np.zeros(p, dtype=int), ar, sub + 1])
            cols = np.concatenate([ar, off + ar, off + sub])
            sel = stack[:, :, rows, cols].reshape(K + 1, -1)
            E = (P_w @ sel).reshape(T.size, n, rows.size)
            a = E[:, :, :p]
            Jd = E[:, :, p: 2 * p]
            Js = E[:, :, 2 * p:]
            dens = np.einsum("tmj,mj->tm", a, ex) if off == p else a.sum(axis=2)
            Wt = W.T
            used = Wt > 0
            bad |= np.any(used & (dens <= 0), axis=0)
            safe = np.where(used, dens, 1.0)
            ll += np.sum(np.where(used, Wt * np.log(np.abs(safe)), 0.0), axis=0)
            g = np.where(used, Wt / safe, 0.0)
            Z += np.einsum("tm,tmj->mj", g, Jd)
            if p > 1:
                Non += on * np.einsum("tm,tmj->mj", g, Js)
            if off == p:
                Nex += ex * np.einsum("tm,tmj->mj", g, a)
        return ll, Z, Non, Nex, bad

    def run(self, max_iterations=None, subset=None):
        """Advance active models (optionally only ``subset``).

        With ``max_iterations`` the call returns after that many sweeps;
        models still running then hold the likelihood of their previous
        parameters, a lower bound for their current one.
        """
        cfg = self.config
        limit = math.inf if max_iterations is None else max_iterations
        run_mask = self.active.copy()
        if subset is not None:
            keep = np.zeros_like(run_mask)
            keep[subset] = True
            run_mask &= keep
        steps = 0
        while steps < limit:
            idx = np.flatnonzero(run_mask)
            if idx.size == 0:
                break
            ll, Z, Non, Nex, bad = self._estep(idx)
            prev = self.ll[idx]
            first = ~np.isfinite(prev)
            self.degenerate[idx[bad]] = True
            done = bad | (~first & (ll - prev < cfg.ll_tolerance)) | (self.iterations[idx] >= cfg.max_iterations)
            self.ll[idx] = np.where(bad, -np.inf, ll)
            stop = idx[done]
            self.active[stop] = False
            run_mask[stop] = False
            upd = ~done
            if np.any(upd):
                u = idx[upd]
                z = Z[upd]
                on = Non[upd] / z[:, :-1] if self.p > 1 else np.zeros((u.size, 0))
                ex = np.where(self.structural, Nex[upd] / z, 0.0)
                self.onward[u] = np.clip(on, cfg.rate_floor, cfg.rate_ceiling)
                self.exits[u] = np.where(self.structural, np.clip(ex, cfg.rate_floor, cfg.rate_ceiling), 0.0)
                self.iterations[u] += 1
            steps += 1
        return self

    def model(self, i) -> CoxianPH:
        return _from_rates(self.m, self.r, self.onward[i], self.exits[i])


@dataclass
class SplitResult:
    candidate: SplitCandidate
    gain: float
    left: NodeFit
    right: NodeFit
    left_mask: np.ndarray


def best_split(node: NodeData, variables: list, settings: SplitSettings,
               parent: NodeFit | None = None) -> SplitResult | None:
    """Best positive-gain binary split over the candidate variables.

    ``variables`` is a list of ``(index, name, kind)`` triples indexing the
    columns of ``node.X``.  Returns None when no candidate yields a positive
    gain.  Both children must satisfy N > d + 1.  Ties go to the lower
    variable index, then the lower threshold.

    Child models start from the parent fit.  With ``screen_iterations`` > 0
    all candidates first run that many EM iterations; only the
    ``refine_top`` best (by the gain reached so far, a lower bound on the
    converged gain because EM never decreases the likelihood) are run to
    convergence.
    """
    d = settings.d
    if node.N < 2 * (d + 2):
        return None
    nk = _NodeKernel(node)
    if parent is None:
        parent = fit_node(node, settings, kernel=nk.base)
    child_cfg = settings.child_em()
    wts = node.mult * node.weight
    ev = node.events
    cands, masks, sizes = [], [], []
    for var_index, name, kind in sorted(variables, key=lambda v: v[0]):
        x = node.X[:, var_index]
        for cand in candidate_splits(x, var_index, name, kind, settings, node.events, wts):
            left = cand.goes_left(x)
            nl = float(node.mult[left].sum())
            nr = node.N - nl
            if nl <= d + 1 or nr <= d + 1:
                continue
            cands.append(cand)
            masks.append(left)
            sizes.append((nl, nr))
    if not cands:
        return None
    Wc, Ws = [], []
    for left in masks:
        for mask in (left, ~left):
            Wc.append(np.bincount(nk.ic[mask[ev]], weights=wts[ev & mask], minlength=nk.uc.size))
            Ws.append(np.bincount(nk.is_[mask[~ev]], weights=wts[~ev & mask], minlength=nk.us.size))
    M = 2 * len(cands)
    ph0 = parent.ph
    on0 = np.tile(np.asarray(ph0.lambdas, dtype=float), (M, 1))
    ex0 = np.tile(ph0.exit_rates, (M, 1))
    batch = BatchEM(nk.uc, nk.us, np.array(Wc), np.array(Ws), ph0.m, ph0.r, on0, ex0, child_cfg)

    def gains():
        ll = batch.ll
        out = np.full(len(cands), -np.inf)
        for c, (nl, nr) in enumerate(sizes):
            a, b = ll[2 * c], ll[2 * c + 1]
            if np.isfinite(a) and np.isfinite(b):
                out[c] = parent.wic - (wic(a, d, nl) + wic(b, d, nr))
        return out

    if settings.screen_iterations > 0 and len(cands) > settings.refine_top:
        batch.run(max_iterations=settings.screen_iterations)
        g = gains()
        top = np.argsort(-g, kind="stable")[: settings.refine_top]
        batch.run(subset=np.concatenate([2 * top, 2 * top + 1]))
        g = gains()
        considered = set(top.tolist())
    else:
        batch.run()
        g = gains()
        considered = set(range(len(cands)))
    best = None
    for c in range(len(cands)):
        if c not in considered or not g[c] > 0:
            continue
        if best is None or g[c] > g[best]:
            best = c
    if best is None:
        return None
    fits = []
    for k, n_child in ((2 * best, sizes[best][0]), (2 * best + 1, sizes[best][1])):
        L = float(batch.ll[k])
        fits.append(NodeFit(ph=batch.model(k), L=L, d=d, N=n_child, wic=wic(L, d, n_child),
                            iterations=int(batch.iterations[k])))
    return SplitResult(cands[best], float(g[best]), fits[0], fits[1], masks[best])
