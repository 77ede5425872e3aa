"""Coxian phase-type distributions for time to readmission.

A Coxian ``PH(pi, Q)`` here has ``m`` short-stay phases followed by ``r``
long-stay phases.  Patients start in phase 1, move forward through the
phases, and are absorbed (readmitted) either from phase ``m`` at rate
``lambda_ss`` or from the last phase ``m + r`` at rate ``lambda_ls``.
All rates are per day.

Matrix exponentials are evaluated by uniformization.  The EM fit uses the
classical sufficient statistics for phase-type data (starts, time spent in
each phase, jumps, exits) with right-censored observations contributing
survival-conditioned expectations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaln
from scipy.stats import poisson

# Uniformization is abandoned in favour of Pade scaling-and-squaring above
# this many Poisson terms (only reachable with extreme rates).
_MAX_TERMS = 20000
_DEFAULT_TOL = 1e-12


class DegenerateLikelihood(float):
    """Log-likelihood of ``-inf`` caused by zero density at complete times."""

    def __new__(cls, n_zero: int = 1):
        obj = super().__new__(cls, "-inf")
        obj.n_zero = n_zero
        return obj

    def __repr__(self):
        return f"DegenerateLikelihood(n_zero={self.n_zero})"


@dataclass(frozen=True)
class CoxianPH:
    """Coxian distribution with short-stay and long-stay phase groups.

    ``lambdas`` holds the forward rates ``lambda_1 .. lambda_{m+r-1}``;
    ``lambdas[m-1]`` is the short-stay to long-stay transition when r > 0.
    ``lambda_ls`` is ignored (and may be None) when ``r == 0``.
    """

    m: int
    r: int
    lambdas: tuple
    lambda_ss: float
    lambda_ls: float | None = None

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be an integer >= 1, got {self.m!r}")
        if int(self.r) != self.r or self.r < 0:
            raise ValueError(f"r must be an integer >= 0, got {self.r!r}")
        lambdas = tuple(float(x) for x in self.lambdas)
        if len(lambdas) != self.m + self.r - 1:
            raise ValueError(
                f"expected {self.m + self.r - 1} sequential rates, got {len(lambdas)}"
            )
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "lambda_ss", float(self.lambda_ss))
        rates = list(lambdas) + [self.lambda_ss]
        if self.r > 0:
            if self.lambda_ls is None:
                raise ValueError("lambda_ls is required when r > 0")
            object.__setattr__(self, "lambda_ls", float(self.lambda_ls))
            rates.append(self.lambda_ls)
        elif self.lambda_ls is not None:
            object.__setattr__(self, "lambda_ls", float(self.lambda_ls))
        for x in rates:
            if not (x > 0 and math.isfinite(x)):
                raise ValueError(f"rates must be positive and finite, got {x!r}")

    @property
    def order(self) -> int:
        return self.m + self.r

    @property
    def pi(self) -> np.ndarray:
        v = np.zeros(self.order)
        v[0] = 1.0
        return v

    @property
    def exit_rates(self) -> np.ndarray:
        """Absorption rate from each phase, i.e. ``-Q 1``."""
        t = np.zeros(self.order)
        t[self.m - 1] = self.lambda_ss
        if self.r > 0:
            t[-1] = self.lambda_ls
        return t

    @property
    def Q(self) -> np.ndarray:
        p = self.order
        q = np.zeros((p, p))
        for h, lam in enumerate(self.lambdas):
            q[h, h + 1] = lam
        q[np.diag_indices(p)] = -(np.append(self.lambdas, 0.0) + self.exit_rates)
        return q

    @property
    def intensity_matrix(self) -> np.ndarray:
        """Full generator with the absorbing state appended last."""
        p = self.order
        a = np.zeros((p + 1, p + 1))
        a[:p, :p] = self.Q
        a[:p, p] = self.exit_rates
        return a

    def max_rate(self) -> float:
        return float(np.max(-np.diag(self.Q)))

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "r": self.r,
            "lambdas": [repr(x) for x in self.lambdas],
            "lambda_ss": repr(self.lambda_ss),
            "lambda_ls": None if self.lambda_ls is None else repr(self.lambda_ls),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CoxianPH:
        ls = d.get("lambda_ls")
        return cls(
            m=int(d["m"]),
            r=int(d["r"]),
            lambdas=tuple(float(x) for x in d["lambdas"]),
            lambda_ss=float(d["lambda_ss"]),
            lambda_ls=None if ls is None else float(ls),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> CoxianPH:
        return cls.from_dict(json.loads(text))


def coxian_new(m, r, lambdas, lambda_ss, lambda_ls=None) -> CoxianPH:
    return CoxianPH(m=m, r=r, lambdas=tuple(lambdas), lambda_ss=lambda_ss, lambda_ls=lambda_ls)


def _from_rates(m: int, r: int, onward: np.ndarray, exits: np.ndarray) -> CoxianPH:
    return CoxianPH(
        m=m,
        r=r,
        lambdas=tuple(float(x) for x in onward),
        lambda_ss=float(exits[m - 1]),
        lambda_ls=float(exits[-1]) if r > 0 else None,
    )


# ---------------------------------------------------------------------------
# uniformization


def poisson_truncation(lam: float, tol: float) -> int:
    """Smallest K with P(Poisson(lam) > K) <= tol."""
    if lam <= 0:
        return 0
    return int(poisson.isf(tol, lam))


def _poisson_weights(lam_t: np.ndarray, K: int) -> np.ndarray:
    """Matrix of Poisson pmf values, shape (len(lam_t), K + 1)."""
    lam_t = np.asarray(lam_t, dtype=float)
    k = np.arange(K + 1)
    out = np.zeros((lam_t.size, K + 1))
    pos = lam_t > 0
    if np.any(pos):
        lt = lam_t[pos][:, None]
        out[pos] = np.exp(k * np.log(lt) - lt - gammaln(k + 1))
    out[~pos, 0] = 1.0
    return out


def _power_stack(P: np.ndarray, K: int) -> np.ndarray:
    """``[P^0, P^1, ..., P^K]`` built by doubling with batched products."""
    n = P.shape[0]
    stack = np.empty((K + 1, n, n))
    stack[0] = np.eye(n)
    filled = 1
    while filled <= K:
        take = min(filled, K + 1 - filled)
        step = stack[filled - 1] @ P  # P^filled
        stack[filled : filled + take] = stack[:take] @ step
        filled += take
    return stack


def matexp_action(Q, t: float, vector, tol: float = _DEFAULT_TOL) -> np.ndarray:
    """Compute ``exp(Q t) v`` for a sub-intensity matrix ``Q``.

    Uses uniformization ``sum_k Pois(k; theta t) P^k v`` with
    ``P = I + Q / theta``.  ``P`` is substochastic and nonnegative, so the
    neglected Poisson tail mass times ``max|v|`` bounds the error.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    Q = np.asarray(Q, dtype=float)
    v = np.asarray(vector, dtype=float)
    if t == 0:
        return v.copy()
    theta = float(np.max(-np.diag(Q)))
    if theta <= 0:
        return v.copy()
    scale = float(np.max(np.abs(v))) or 1.0
    K = poisson_truncation(theta * t, tol / scale)
    if K > _MAX_TERMS:
        return linalg.expm(Q * t) @ v
    P = np.eye(Q.shape[0]) + Q / theta
    w = _poisson_weights(np.array([theta * t]), K)[0]
    acc = w[0] * v
    term = v
    for k in range(1, K + 1):
        term = P @ term
        acc = acc + w[k] * term
    return acc


def expm_multi(Q, times, tol: float = _DEFAULT_TOL) -> np.ndarray:
    """``exp(Q t)`` for every ``t`` in ``times``; shape (n, p, p)."""
    Q = np.asarray(Q, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise ValueError("times must be >= 0")
    p = Q.shape[0]
    theta = float(np.max(-np.diag(Q)))
    if theta <= 0 or times.size == 0:
        return np.broadcast_to(np.eye(p), (times.size, p, p)).copy()
    K = poisson_truncation(theta * float(times.max()), tol)
    if K > _MAX_TERMS:
        return np.stack([linalg.expm(Q * t) for t in times])
    P = np.eye(p) + Q / theta
    stack = _power_stack(P, K).reshape(K + 1, p * p)
    W = _poisson_weights(theta * times, K)
    return (W @ stack).reshape(times.size, p, p)


# ---------------------------------------------------------------------------
# distribution functions


def _check_times(t) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("t must be >= 0")
    return arr


def density(ph: CoxianPH, t):
    """``f(t) = pi exp(Q t) (-Q 1)``; scalar in, scalar out."""
    arr = _check_times(t)
    E = expm_multi(ph.Q, arr.ravel())
    f = E[:, 0, :] @ ph.exit_rates
    f = np.maximum(f, 0.0).reshape(arr.shape)
    return float(f) if f.ndim == 0 else f


def survival(ph: CoxianPH, t):
    """``S(t) = pi exp(Q t) 1``."""
    arr = _check_times(t)
    E = expm_multi(ph.Q, arr.ravel())
    s = np.clip(E[:, 0, :].sum(axis=1), 0.0, 1.0).reshape(arr.shape)
    return float(s) if s.ndim == 0 else s


def cdf(ph: CoxianPH, t):
    return 1.0 - survival(ph, t)


def moment(ph: CoxianPH, k: int) -> float:
    """k-th raw moment ``(-1)^k k! pi Q^{-k} 1``."""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    negQ = -ph.Q
    v = np.ones(ph.order)
    for _ in range(int(k)):
        v = linalg.solve_triangular(negQ, v, lower=False)
    return float(math.factorial(int(k)) * v[0])


def mean(ph: CoxianPH) -> float:
    return moment(ph, 1)


def sample_sojourn(ph: CoxianPH, rng: np.random.Generator, size=None):
    """Simulate absorption times of the underlying Markov chain."""
    n = 1 if size is None else int(np.prod(size))
    onward = np.append(ph.lambdas, 0.0)
    exits = ph.exit_rates
    total = onward + exits
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for h in range(ph.order):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        t[idx] += rng.exponential(1.0 / total[h], size=idx.size)
        if exits[h] > 0:
            absorbed = rng.random(idx.size) < exits[h] / total[h]
            alive[idx[absorbed]] = False
    if size is None:
        return float(t[0])
    return t.reshape(size)


# ---------------------------------------------------------------------------
# observations and likelihood


@dataclass(frozen=True)
class ObservationSet:
    """Times to readmission with event flags (True = readmission observed)."""

    times: np.ndarray
    events: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        events = np.asarray(self.events, dtype=bool).ravel()
        if times.shape != events.shape:
            raise ValueError("times and events must have the same length")
        if np.any(~(times > 0)):
            raise ValueError("all times must be > 0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape != times.shape or np.any(w < 0):
                raise ValueError("weights must be nonnegative and match times")
            object.__setattr__(self, "weights", w)

    @property
    def N(self) -> int:
        return int(self.times.size)

    def w(self) -> np.ndarray:
        return np.ones(self.N) if self.weights is None else self.weights


def log_likelihood(ph: CoxianPH, obs: ObservationSet) -> float:
    """Censored log-likelihood: complete times add log f, censored add log S."""
    w = obs.w()
    ll = 0.0
    n_zero = 0
    if np.any(obs.events):
        f = np.atleast_1d(density(ph, obs.times[obs.events]))
        we = w[obs.events]
        bad = (f <= 0) & (we > 0)
        n_zero = int(bad.sum())
        if n_zero:
            return DegenerateLikelihood(n_zero)
        ll += float(np.sum(we[we > 0] * np.log(f[we > 0])))
    if np.any(~obs.events):
        s = np.atleast_1d(survival(ph, obs.times[~obs.events]))
        wc = w[~obs.events]
        if np.any((s <= 0) & (wc > 0)):
            return DegenerateLikelihood(int(np.sum((s <= 0) & (wc > 0))))
        ll += float(np.sum(wc[wc > 0] * np.log(s[wc > 0])))
    return ll


# ---------------------------------------------------------------------------
# EM fitting


@dataclass
class EmConfig:
    max_iterations: int = 500
    ll_tolerance: float = 1e-6
    ode_steps_per_unit_time: int = 200
    init_strategy: str = "moment_matched"  # moment_matched | uniform_rates | user_supplied
    seed: int = 0
    init_model: CoxianPH | None = None
    estep: str = "uniformization"  # uniformization | rk4
    rate_ceiling: float = 1e6
    rate_floor: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.ll_tolerance > 0:
            raise ValueError("ll_tolerance must be > 0")
        if self.ode_steps_per_unit_time < 1:
            raise ValueError("ode_steps_per_unit_time must be >= 1")
        if self.init_strategy not in ("moment_matched", "uniform_rates", "user_supplied"):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")
        if self.init_strategy == "user_supplied" and self.init_model is None:
            raise ValueError("user_supplied init requires init_model")
        if self.estep not in ("uniformization", "rk4"):
            raise ValueError(f"unknown estep {self.estep!r}")


@dataclass
class FitDiagnostics:
    iterations: int
    log_likelihood: float
    converged: bool
    trace: list = field(default_factory=list)
    boundary: bool = False
    all_censored: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "boundary": self.boundary,
            "all_censored": self.all_censored,
        }


def initial_model(obs: ObservationSet, m: int, r: int, config: EmConfig) -> CoxianPH:
    """Starting point for EM.

    ``moment_matched``: every phase gets the same total outflow rate ``c``;
    phase m splits it evenly between absorption and moving on.  ``c`` is
    chosen so the model mean equals the censoring-aware mean estimate
    (total exposure / number of events).
    """
    if config.init_strategy == "user_supplied":
        ph = config.init_model
        if (ph.m, ph.r) != (m, r):
            raise ValueError("init_model order does not match (m, r)")
        return ph
    w = obs.w()
    n_events = float(np.sum(w[obs.events]))
    exposure = float(np.sum(w * obs.times))
    if n_events > 0:
        mu = exposure / n_events
    else:
        mu = 2.0 * float(obs.times.max())
    mu = max(mu, 1e-8)
    c = (m + 0.5 * r) / mu if r > 0 else m / mu
    p = m + r
    onward = np.full(p - 1, c)
    exits = np.zeros(p)
    if r > 0:
        onward[m - 1] = 0.5 * c
        exits[m - 1] = 0.5 * c
        exits[-1] = c
    else:
        exits[m - 1] = c
    if config.init_strategy == "uniform_rates":
        rng = np.random.default_rng(config.seed)
        onward = onward * rng.uniform(0.5, 1.5, size=onward.size)
        exits = np.where(exits > 0, exits * rng.uniform(0.5, 1.5, size=p), 0.0)
    return _from_rates(m, r, onward, exits)


def _compress(times: np.ndarray, weights: np.ndarray):
    keep = weights > 0
    u, inv = np.unique(times[keep], return_inverse=True)
    return u, np.bincount(inv, weights=weights[keep], minlength=u.size)


class EStepKernel:
    """Exact E-step for a fixed set of (time, weight) observations.

    Poisson weights for a uniformization rate ``theta`` are cached, so
    repeated E-steps (EM iterations, or child fits sharing a parent cache)
    only need a power stack of the block generator and one matrix product.
    The block generator ``[[Q, c pi], [0, Q]]`` carries the convolution
    integrals needed for expected phase occupancy and jump counts in its
    upper-right block (``c`` is the exit vector for complete observations
    and the ones vector for censored ones).
    """

    def __init__(self, times_c, w_c, times_s, w_s, theta=None, tol=1e-13):
        self.tc = np.asarray(times_c, dtype=float)
        self.wc = np.asarray(w_c, dtype=float)
        self.ts = np.asarray(times_s, dtype=float)
        self.ws = np.asarray(w_s, dtype=float)
        self.tol = tol
        self.theta = None
        if theta is not None:
            self._build(theta)

    @classmethod
    def from_observations(cls, obs: ObservationSet, theta=None):
        w = obs.w()
        tc, wc = _compress(obs.times[obs.events], w[obs.events])
        ts, ws = _compress(obs.times[~obs.events], w[~obs.events])
        return cls(tc, wc, ts, ws, theta=theta)

    def subset(self, w_c, w_s) -> EStepKernel:
        """Kernel over the same time grid with new weights, sharing caches."""
        kc = w_c > 0
        ks = w_s > 0
        k = EStepKernel.__new__(EStepKernel)
        k.tc, k.wc = self.tc[kc], np.asarray(w_c)[kc]
        k.ts, k.ws = self.ts[ks], np.asarray(w_s)[ks]
        k.tol = self.tol
        k.theta = self.theta
        if self.theta is not None:
            k.K = self.K
            k.fallback = self.fallback
            k.Wc = self.Wc[kc] if self.Wc is not None else None
            k.Ws = self.Ws[ks] if self.Ws is not None else None
        return k

    @property
    def total_weight(self) -> float:
        return float(self.wc.sum() + self.ws.sum())

    def _build(self, theta):
        self.theta = float(theta)
        tmax = max(
            float(self.tc.max()) if self.tc.size else 0.0,
            float(self.ts.max()) if self.ts.size else 0.0,
        )
        self.K = poisson_truncation(self.theta * tmax, self.tol)
        self.fallback = self.K > _MAX_TERMS
        if self.fallback:
            self.Wc = self.Ws = None
        else:
            self.Wc = _poisson_weights(self.theta * self.tc, self.K)
            self.Ws = _poisson_weights(self.theta * self.ts, self.K)

    def _block_exps(self, Q, c, W, times):
        p = Q.shape[0]
        B = np.zeros((2 * p, 2 * p))
        B[:p, :p] = Q
        B[p:, p:] = Q
        B[:p, p] = c  # c pi with pi = e_1
        if self.fallback:
            return np.stack([linalg.expm(B * t) for t in times])
        P = np.eye(2 * p) + B / self.theta
        stack = _power_stack(P, self.K)
        # only row 0 of the top-left block and the upper-right block are used
        sel = np.concatenate([stack[:, 0, :p], stack[:, :p, p:].reshape(self.K + 1, p * p)], axis=1)
        E = W @ sel
        out = np.zeros((times.size, 2 * p, 2 * p))
        out[:, 0, :p] = E[:, :p]
        out[:, :p, p:] = E[:, p:].reshape(times.size, p, p)
        return out

    def estep(self, ph: CoxianPH):
        """Return (log-likelihood, Z, N_onward, N_exit) at ``ph``."""
        maxrate = ph.max_rate()
        if self.theta is None or maxrate > self.theta:
            self._build(1.5 * maxrate)
        Q = ph.Q
        p = ph.order
        exit_ = ph.exit_rates
        onward = np.asarray(ph.lambdas)
        Z = np.zeros(p)
        Non = np.zeros(p - 1)
        Nex = np.zeros(p)
        ll = 0.0
        sub = np.arange(p - 1)
        if self.tc.size:
            E = self._block_exps(Q, exit_, self.Wc, self.tc)
            a = E[:, 0, :p]
            f = a @ exit_
            if np.any(f <= 0):
                return DegenerateLikelihood(int(np.sum(f <= 0))), None, None, None
            J = E[:, :p, p:]
            g = self.wc / f
            ll += float(np.dot(self.wc, np.log(f)))
            Z += g @ J[:, np.arange(p), np.arange(p)]
            if p > 1:
                Non += onward * (g @ J[:, sub + 1, sub])
            Nex += exit_ * (g @ a)
        if self.ts.size:
            E = self._block_exps(Q, np.ones(p), self.Ws, self.ts)
            a = E[:, 0, :p]
            s = a.sum(axis=1)
            if np.any(s <= 0):
                return DegenerateLikelihood(int(np.sum(s <= 0))), None, None, None
            J = E[:, :p, p:]
            g = self.ws / s
            ll += float(np.dot(self.ws, np.log(s)))
            Z += g @ J[:, np.arange(p), np.arange(p)]
            if p > 1:
                Non += onward * (g @ J[:, sub + 1, sub])
        return ll, Z, Non, Nex


def _estep_rk4(ph: CoxianPH, kernel: EStepKernel, steps_per_unit: int):
    """E-step by fourth-order integration of the sufficient-statistic ODEs.

    State along y: ``a(y) = pi exp(Q y)`` and two convolution matrices
    ``H' = Q H + c a(y)`` (``c`` = exit vector for complete observations,
    ones for censored).  Integration sweeps once over the sorted times.
    """
    Q = ph.Q
    p = ph.order
    exit_ = ph.exit_rates
    ones = np.ones(p)
    onward = np.asarray(ph.lambdas)

    def rhs(a, Hc, Hs):
        return a @ Q, Q @ Hc + np.outer(exit_, a), Q @ Hs + np.outer(ones, a)

    events = [(t, 0, i) for i, t in enumerate(kernel.tc)] + [(t, 1, i) for i, t in enumerate(kernel.ts)]
    events.sort()
    a = ph.pi.copy()
    Hc = np.zeros((p, p))
    Hs = np.zeros((p, p))
    y = 0.0
    h_max = 1.0 / steps_per_unit
    Z = np.zeros(p)
    Non = np.zeros(p - 1)
    Nex = np.zeros(p)
    ll = 0.0
    sub = np.arange(p - 1)
    for t, kind, i in events:
        while y < t:
            h = min(h_max, t - y)
            k1 = rhs(a, Hc, Hs)
            k2 = rhs(a + 0.5 * h * k1[0], Hc + 0.5 * h * k1[1], Hs + 0.5 * h * k1[2])
            k3 = rhs(a + 0.5 * h * k2[0], Hc + 0.5 * h * k2[1], Hs + 0.5 * h * k2[2])
            k4 = rhs(a + h * k3[0], Hc + h * k3[1], Hs + h * k3[2])
            a = a + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            Hc = Hc + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            Hs = Hs + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            y = t if t - y <= h else y + h
        if kind == 0:
            w = kernel.wc[i]
            f = float(a @ exit_)
            if f <= 0:
                return DegenerateLikelihood(1), None, None, None
            ll += w * math.log(f)
            Z += w * np.diag(Hc) / f
            Non += w * onward * Hc[sub + 1, sub] / f
            Nex += w * exit_ * a / f
        else:
            w = kernel.ws[i]
            s = float(a.sum())
            if s <= 0:
                return DegenerateLikelihood(1), None, None, None
            ll += w * math.log(s)
            Z += w * np.diag(Hs) / s
            Non += w * onward * Hs[sub + 1, sub] / s
    return ll, Z, Non, Nex


def _mstep(ph: CoxianPH, Z, Non, Nex, floor, ceiling):
    onward = Non / Z[:-1]
    exits = Nex / Z
    structural = ph.exit_rates > 0
    exits = np.where(structural, exits, 0.0)
    hit = bool(
        np.any(onward < floor) or np.any(onward > ceiling)
        or np.any(exits[structural] < floor) or np.any(exits[structural] > ceiling)
    )
    onward = np.clip(onward, floor, ceiling)
    exits = np.where(structural, np.clip(exits, floor, ceiling), 0.0)
    return _from_rates(ph.m, ph.r, onward, exits), hit


def em_iterate(kernel: EStepKernel, ph: CoxianPH, config: EmConfig):
    """Run EM from ``ph`` on a prepared kernel; see :func:`fit_em`."""
    trace = []
    boundary = False
    converged = False
    ll_prev = None
    it = 0
    while True:
        if config.estep == "rk4":
            ll, Z, Non, Nex = _estep_rk4(ph, kernel, config.ode_steps_per_unit_time)
        else:
            ll, Z, Non, Nex = kernel.estep(ph)
        trace.append(ll)
        if isinstance(ll, DegenerateLikelihood):
            break
        if ll_prev is not None and ll - ll_prev < config.ll_tolerance:
            converged = True
            break
        if it >= config.max_iterations:
            break
        new_ph, hit = _mstep(ph, Z, Non, Nex, config.rate_floor, config.rate_ceiling)
        boundary = boundary or hit
        ph = new_ph
        ll_prev = ll
        it += 1
    diag = FitDiagnostics(
        iterations=it,
        log_likelihood=float(trace[-1]),
        converged=converged,
        trace=trace,
        boundary=boundary,
        all_censored=kernel.wc.size == 0,
    )
    return ph, diag


def fit_em(obs: ObservationSet, m: int = 1, r: int = 1, config: EmConfig | None = None):
    """Fit a Coxian PH(m, r) to censored times by EM.

    Returns ``(ph, FitDiagnostics)``.  The trace holds the log-likelihood
    before each M-step plus the final value; it is nondecreasing up to
    rounding.  ``converged`` is set only when an improvement below
    ``ll_tolerance`` was observed within ``max_iterations`` updates.
    """
    config = config or EmConfig()
    if obs.N == 0:
        raise ValueError("cannot fit an empty observation set")
    ph = initial_model(obs, m, r, config)
    kernel = EStepKernel.from_observations(obs)
    return em_iterate(kernel, ph, config)
