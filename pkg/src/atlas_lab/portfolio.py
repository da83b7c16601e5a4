"""Portfolio constructions on simulated markets and their long-run rates.

Strategies covered: the market itself, fixed constant-proportion rules, the
hindsight target (best constant portfolio for a realized path), its
asymptotic stationary counterpart, the performance-weighted universal
portfolio, and the chamber-by-chamber growth-optimal rule.

Wealth is tracked in log scale throughout; over the horizons where the rate
comparisons bite, V(T) itself overflows a double long before the rates
stabilize. WealthTrack therefore stores log V and its CSV column is named
log_V to keep the files honest.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from ._util import write_csv
from .errors import (
    DomainError,
    HypothesisError,
    NumericalError,
    StructuralError,
    UnavailableError,
)
from .invariant import InvariantMeasure
from .sde import SimOutput, noise_blocks

__all__ = [
    "MIN_DIAG_A",
    "PortfolioWeights",
    "WealthTrack",
    "wealth_constant",
    "market_wealth",
    "excess_growth",
    "asymptotic_covariance",
    "asymptotic_target",
    "target_portfolio",
    "universal_portfolio",
    "growth_optimal",
    "longrun_rates",
    "RateReport",
    "activity_check",
    "ActivityReport",
    "compare_strategies",
    "ComparisonReport",
]

MIN_DIAG_A = 1e-8        # covariance floor below which target weights blow up
_WEIGHT_SUM_TOL = 1e-12
_UNIVERSAL_MIN_MC = 100
_UNIVERSAL_MAX_EVAL = 1025


@dataclass(frozen=True)
class PortfolioWeights:
    """A point of the affine simplex: weights summing to one, possibly
    negative (short positions allowed unless the nonnegative flag is set)."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise StructuralError("weights must be a vector of length >= 2")
        if not np.all(np.isfinite(w)):
            raise StructuralError("non-finite weights")
        if abs(w.sum() - 1.0) > _WEIGHT_SUM_TOL:
            raise StructuralError(f"weights sum to {w.sum()!r}, not 1")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self):
        return self.w.size

    @property
    def nonnegative(self):
        return bool(np.all(self.w >= 0.0))

    @classmethod
    def equal(cls, n):
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def single(cls, n, i):
        """All wealth in name i (1-based)."""
        if not 1 <= i <= n:
            raise StructuralError(f"name index {i} out of 1..{n}")
        w = np.zeros(n)
        w[i - 1] = 1.0
        return cls(w)


@dataclass(frozen=True)
class WealthTrack:
    """log V on a time grid with V(0) = 1."""

    times: np.ndarray
    log_values: np.ndarray
    terminal_log_stderr: Optional[float] = None   # MC-averaged strategies only

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        lv = np.asarray(self.log_values, dtype=np.float64)
        if t.shape != lv.shape or t.ndim != 1 or t.size < 2:
            raise StructuralError("times and log_values must be equal-length vectors")
        if not (np.all(np.isfinite(lv)) and abs(lv[0]) < 1e-9):
            raise StructuralError("wealth must start at V(0) = 1 and stay finite")
        for name, arr in (("times", t), ("log_values", lv)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def terminal_rate(self):
        return float(self.log_values[-1] / self.times[-1])

    @property
    def values(self):
        """V itself; overflows to inf past log V ~ 709."""
        with np.errstate(over="ignore"):
            return np.exp(self.log_values)

    def to_csv(self, path):
        write_csv(path, ["t", "log_V"], list(zip(self.times, self.log_values)))


def _path_arrays(out: SimOutput, path):
    if out.y is None or out.a is None:
        raise UnavailableError("needs a run with store_paths=True")
    if not 0 <= path < out.cfg.paths:
        raise StructuralError(f"path {path} out of range 0..{out.cfg.paths - 1}")
    return out.y[path], out.a[path]


def _log_wealth_constant(pi_w, y, a):
    """log V^pi on the stored grid, closed form:
    sum_i pi_i (A_ii/2 + dY_i) - (1/2) pi' A pi."""
    dy = y - y[0]
    diag = a[:, np.arange(a.shape[1]), np.arange(a.shape[2])]
    quad = np.einsum("i,tij,j->t", pi_w, a, pi_w)
    return (diag / 2 + dy) @ pi_w - quad / 2


def wealth_constant(pi: PortfolioWeights, out: SimOutput, path=0):
    """Wealth of a constant-proportion portfolio, closed form, cross-checked
    against compounding the stepwise log increments of the rebalancing rule
    over the stored grid (the two must telescope to the same values)."""
    y, a = _path_arrays(out, path)
    if pi.n != out.params.n:
        raise StructuralError("weight dimension does not match the model")
    lv = _log_wealth_constant(pi.w, y, a)

    ddy = np.diff(y, axis=0)
    dda = np.diff(a, axis=0)
    ddiag = dda[:, np.arange(pi.n), np.arange(pi.n)]
    inc = (ddiag / 2 + ddy) @ pi.w - np.einsum("i,tij,j->t", pi.w, dda, pi.w) / 2
    lv_steps = np.concatenate(([0.0], np.cumsum(inc)))
    gap = np.abs(lv - lv_steps).max()
    if gap > 1e-6:
        raise NumericalError(
            f"closed-form and compounded wealth disagree by {gap:.3g} in log"
        )
    return WealthTrack(out.times, lv)


def market_wealth(out: SimOutput, path=0):
    """Wealth of holding the market: compounds the market-weighted growth
    factor step by step and checks it against X(t)/X(0) at every stored
    point (the identity is exact, so the check is pure float hygiene)."""
    y, _ = _path_arrays(out, path)
    lse = np.logaddexp.reduce(y, axis=1)
    ratio = lse - lse[0]

    logmu = y[:-1] - lse[:-1, None]
    inc = np.logaddexp.reduce(logmu + np.diff(y, axis=0), axis=1)
    lv = np.concatenate(([0.0], np.cumsum(inc)))
    bad = np.abs(lv - ratio).max()
    if bad > 1e-10:
        raise NumericalError(f"market recursion drifted {bad:.3g} from X(t)/X(0)")
    return WealthTrack(out.times, lv)


def excess_growth(pi: PortfolioWeights, a):
    """(1/2)(sum_i pi_i a_ii - pi' a pi): the diversification drift bonus."""
    a = np.asarray(a, dtype=np.float64)
    n = pi.n
    if a.shape != (n, n):
        raise StructuralError(f"covariance must be {n}x{n}, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-9):
        raise StructuralError("covariance must be symmetric")
    return float((np.diag(a) @ pi.w - pi.w @ a @ pi.w) / 2)


def asymptotic_covariance(measure: InvariantMeasure, params):
    """Long-run average covariance rate: occupation-weighted rank variances,

        a_inf_ii = sum_k theta_{k,i} sigma_k^2,

    diagonal because name-level loadings are excluded by hypothesis."""
    measure._need_exact()
    if not params.rho_is_zero:
        raise HypothesisError("asymptotic covariance needs rho = 0")
    return np.diag(measure.theta.T @ params.sigma_sq)


def asymptotic_target(measure: InvariantMeasure, params):
    """The constant portfolio maximizing the long-run growth rate
    gamma + excess_growth(pi, a_inf) over the affine simplex.

    Solved as the KKT system of the concave quadratic; for diagonal a_inf
    the closed form pi_i = (1/2)[1 - (n-2)/(a_ii sum_j 1/a_jj)] is evaluated
    too and the two must agree to 1e-12.
    """
    a = asymptotic_covariance(measure, params)
    n = a.shape[0]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = a
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.concatenate((np.diag(a) / 2, [1.0]))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"degenerate asymptotic covariance: {exc}") from exc
    w = sol[:n]

    d = np.diag(a)
    closed = (1.0 - (n - 2) / (d * (1.0 / d).sum())) / 2
    if np.abs(w - closed).max() > 1e-12:
        raise NumericalError("quadratic solver disagrees with the closed form")
    return PortfolioWeights(w)


def _target_at(out: SimOutput, t, path):
    y, a = _path_arrays(out, path)
    idx = int(np.argmin(np.abs(out.times - t)))
    step = out.times[1] - out.times[0]
    if abs(out.times[idx] - t) > step / 2 + 1e-12:
        raise StructuralError(f"t={t} not on the stored grid")
    A = a[idx]
    if np.diag(A).min() <= MIN_DIAG_A:
        raise DomainError(
            "accumulated covariance too small at this t; target undefined"
        )
    dy = y[idx] - y[0]
    n = len(dy)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = A
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.concatenate((np.diag(A) / 2 + dy, [1.0]))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular covariance at t={t}: {exc}") from exc
    w = sol[:n]
    logv = float((np.diag(A) / 2 + dy) @ w - w @ A @ w / 2)

    # the max over constant portfolios dominates every single stock, hence
    # also their geometric and arithmetic means; failure means a bad solve
    best_single = dy.max()
    geo = dy.mean()
    arith = np.logaddexp.reduce(dy) - math.log(n)
    if logv + 1e-9 < max(best_single, geo, arith):
        raise NumericalError("target solve undershoots a dominated benchmark")
    return PortfolioWeights(w), logv


def target_portfolio(out: SimOutput, t, path=0):
    """Best constant-proportion portfolio for one realized path up to t,
    in hindsight; returns (weights, V*(t)). V* overflows to inf for long
    horizons; wealth_constant on the weights recovers log V* exactly."""
    w, logv = _target_at(out, t, path)
    value = math.exp(logv) if logv < 709 else math.inf
    return w, value


def universal_portfolio(out: SimOutput, mc, seed, path=0):
    """Performance-weighted average over the closed simplex by Monte Carlo:
    V is the sample mean of V^pi over uniform draws, the weights are the
    V^pi-weighted mean of pi. Common samples across all evaluation times.

    Returns (weights path on the evaluation grid, WealthTrack); the track
    carries a delta-method standard error for terminal log V.
    """
    y, a = _path_arrays(out, path)
    if mc < _UNIVERSAL_MIN_MC:
        raise StructuralError(f"mc={mc} too small to report; need >= {_UNIVERSAL_MIN_MC}")
    n = out.params.n
    rng = np.random.Generator(np.random.Philox(key=seed))
    e = rng.standard_exponential((mc, n))
    P = e / e.sum(axis=1, keepdims=True)

    m = len(out.times)
    if m <= _UNIVERSAL_MAX_EVAL:
        grid = np.arange(m)
    else:
        pick = np.geomspace(1, m - 1, _UNIVERSAL_MAX_EVAL - 1)
        grid = np.unique(np.concatenate(([0], np.rint(pick).astype(np.int64))))

    dy = y[grid] - y[0]
    diag = a[grid][:, np.arange(n), np.arange(n)]
    d = diag / 2 + dy                              # (G, n)
    weights_path = np.empty((len(grid), n))
    logv = np.empty(len(grid))
    se_last = 0.0
    for gidx in range(len(grid)):
        lv = P @ d[gidx] - np.einsum("si,ij,sj->s", P, a[grid[gidx]], P) / 2
        mx = lv.max()
        w = np.exp(lv - mx)
        mean_w = w.mean()
        logv[gidx] = mx + math.log(mean_w)
        weights_path[gidx] = (w @ P) / (mean_w * mc)
        if gidx == len(grid) - 1 and mc > 1:
            se_last = float(w.std(ddof=1) / (math.sqrt(mc) * mean_w))
    logv[0] = 0.0
    return weights_path, WealthTrack(
        out.times[grid], logv, terminal_log_stderr=se_last
    )


@njit(cache=True, nogil=True)
def _growth_optimal_blocks(y, noise, dt, sqdt, g, gam_total, sigma, sig2,
                           stride, store, w_store, v_store, state, s0):
    # state = (log V,) carried across blocks
    n = y.shape[0]
    order = np.empty(n, np.int64)
    rank_of = np.empty(n, np.int64)
    gt = np.empty(n)
    w = np.empty(n)
    dy = np.empty(n)
    logv = state[0]
    for t in range(noise.shape[0]):
        s = s0 + t
        for i in range(n):
            order[i] = i
        for i in range(1, n):
            k = order[i]
            j = i - 1
            while j >= 0 and y[order[j]] < y[k]:
                order[j + 1] = order[j]
                j -= 1
            order[j + 1] = k
        for r in range(n):
            rank_of[order[r]] = r

        # weights from the pre-step chamber; the multiplier makes sum w = 1
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            gt[i] = g[rank_of[i]] + gam_total[i]
            inv = 1.0 / sig2[rank_of[i]]
            s1 += inv
            s2 += gt[i] * inv
        gbar = (1.0 - 0.5 * n - s2) / s1
        wsum = 0.0
        for i in range(n):
            w[i] = 0.5 + (gt[i] + gbar) / sig2[rank_of[i]]
            wsum += w[i]
        if abs(wsum - 1.0) > 1e-10:
            return s, 1, logv
        if store and s % stride == 0:
            row = s // stride
            v_store[row] = logv
            for i in range(n):
                w_store[row, i] = w[i]

        growth = 0.0
        for i in range(n):
            dy[i] = gt[i] * dt + sigma[rank_of[i]] * noise[t, i] * sqdt
            growth += w[i] * math.expm1(dy[i])
        if growth <= -1.0:
            return s, 2, logv
        logv += math.log1p(growth)
        for i in range(n):
            y[i] += dy[i]
    state[0] = logv
    return -1, 0, logv


def growth_optimal(params, out: SimOutput, path=0):
    """Growth-optimal rule: each step, maximize the expected log-wealth
    growth given the current chamber; weights are

        w_i = 1/2 + (gtilde_i + gbar) / a_ii

    with the multiplier gbar enforcing sum w = 1 by algebra. The driving
    noise of the original run is regenerated stream-for-stream, so the
    wealth refers to exactly the simulated market.
    """
    if not params.rho_is_zero:
        raise HypothesisError("growth-optimal weights need rho = 0")
    n = params.n
    steps = out.steps
    stride = out.cfg.thin_stride
    if steps % stride != 0:
        raise StructuralError("steps must be divisible by thin_stride")
    if not 0 <= path < out.cfg.paths:
        raise StructuralError(f"path {path} out of range 0..{out.cfg.paths - 1}")
    stored = steps // stride + 1
    w_store = np.empty((stored, n))
    v_store = np.empty(stored)
    y = params.y0.copy()
    state = np.zeros(1)
    gam_total = params.gamma_name + params.gamma
    sqdt = math.sqrt(out.cfg.dt)
    s0 = 0
    for noise in noise_blocks(out.cfg.seed, path, steps, n):
        bad, code, logv = _growth_optimal_blocks(
            y, noise, out.cfg.dt, sqdt, params.g_rank, gam_total,
            params.sigma_rank, params.sigma_rank ** 2, stride, True,
            w_store, v_store, state, s0,
        )
        if bad >= 0:
            if code == 1:
                raise NumericalError(f"weight sum drifted from 1 at step {bad}")
            raise NumericalError(f"wealth hit zero at step {bad}")
        s0 += noise.shape[0]
    v_store[stored - 1] = state[0]
    # terminal chamber for the final weights row
    order = np.argsort(-y, kind="stable")
    rank_of = np.empty(n, dtype=np.int64)
    rank_of[order] = np.arange(n)
    gt = params.g_rank[rank_of] + gam_total
    sig2 = (params.sigma_rank ** 2)[rank_of]
    gbar = (1.0 - 0.5 * n - (gt / sig2).sum()) / (1.0 / sig2).sum()
    w_store[stored - 1] = 0.5 + (gt + gbar) / sig2
    times = np.arange(stored, dtype=np.float64) * (stride * out.cfg.dt)
    if out.y is not None and not np.array_equal(y, out.terminal_y[path]):
        raise NumericalError("regenerated path diverged from the stored run")
    return w_store, WealthTrack(times, v_store)


@dataclass(frozen=True)
class RateReport:
    """Analytic long-run growth rates; closed forms require equal variances
    and no name-level loadings, otherwise only generic machinery applies."""

    gamma: float
    equal_variance: bool
    sigma_sq: Optional[float]
    market_rate: float
    universal_rate: Optional[float]
    asymptotic_target_rate: Optional[float]
    growth_optimal_rate: Optional[float]
    rate_gap: Optional[float]
    g_sq_sum: float
    gamma_sq_sum: float
    g_dominates: bool

    def to_json_dict(self):
        return {
            "gamma": self.gamma,
            "equal_variance": self.equal_variance,
            "sigma_sq": self.sigma_sq,
            "market_rate": self.market_rate,
            "universal_rate": self.universal_rate,
            "asymptotic_target_rate": self.asymptotic_target_rate,
            "growth_optimal_rate": self.growth_optimal_rate,
            "rate_gap": self.rate_gap,
            "g_sq_sum": self.g_sq_sum,
            "gamma_sq_sum": self.gamma_sq_sum,
            "g_dominates": self.g_dominates,
        }


def longrun_rates(params, measure: Optional[InvariantMeasure] = None):
    """Closed-form long-run rates in the equal-variance case:

        universal = asymptotic target = gamma + sigma^2 (1 - 1/n) / 2
        growth-optimal adds (sum g_k^2 - sum gamma_i^2) / (2 sigma^2).

    Also reports whether sum g^2 exceeds sum gamma^2 (it must for the gap
    to be a bonus) and, given a measure, exposes constant_rate for
    arbitrary fixed weights.
    """
    sig2 = params.sigma_sq
    equal = bool(np.ptp(sig2) <= 1e-12 * max(1.0, sig2[0])) and params.rho_is_zero
    g2 = float((params.g_rank ** 2).sum())
    gam2 = float((params.gamma_name ** 2).sum())
    if equal:
        s2 = float(sig2[0])
        base = params.gamma + s2 * (1 - 1 / params.n) / 2
        gap = (g2 - gam2) / (2 * s2)
        uni, tar, gro = base, base, base + gap
    else:
        s2 = None
        uni = tar = gro = gap = None
    return RateReport(
        gamma=params.gamma,
        equal_variance=equal,
        sigma_sq=s2,
        market_rate=params.gamma,
        universal_rate=uni,
        asymptotic_target_rate=tar,
        growth_optimal_rate=gro,
        rate_gap=gap,
        g_sq_sum=g2,
        gamma_sq_sum=gam2,
        g_dominates=g2 > gam2,
    )


def constant_rate(pi: PortfolioWeights, params, measure: InvariantMeasure):
    """Long-run rate of a fixed-weight portfolio:
    gamma + excess_growth(pi, a_inf)."""
    return params.gamma + excess_growth(pi, asymptotic_covariance(measure, params))


@dataclass(frozen=True)
class ActivityReport:
    """Which names keep a positive asymptotic target weight.

    For n >= 3 name i is flagged active when
    1/a_ii < (1/(n-2)) sum_l 1/a_ll; the margin is the right side minus the
    left. For n = 2 the condition is vacuous (both weights are 1/2).
    """

    active: np.ndarray
    margins: np.ndarray
    all_active: bool
    note: Optional[str] = None

    def to_json_dict(self):
        return {
            "active": self.active,
            "margins": self.margins,
            "all_active": self.all_active,
            "note": self.note,
        }


def activity_check(measure: InvariantMeasure, params):
    a = np.diag(asymptotic_covariance(measure, params))
    n = params.n
    if n < 3:
        return ActivityReport(
            active=np.array([True, True]),
            margins=np.full(2, np.inf),
            all_active=True,
            note="n=2: target weights are (1/2, 1/2), always interior",
        )
    inv = 1.0 / a
    bound = inv.sum() / (n - 2)
    margins = bound - inv
    active = margins > 0
    return ActivityReport(
        active=active,
        margins=margins,
        all_active=bool(active.all()),
    )


@dataclass(frozen=True)
class StrategyStats:
    rates: np.ndarray

    @property
    def mean(self):
        return float(self.rates.mean())

    @property
    def stderr(self):
        k = self.rates.size
        return float(self.rates.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0

    def to_json_dict(self):
        return {
            "terminal_rates": self.rates,
            "mean": self.mean,
            "stderr": self.stderr,
        }


@dataclass(frozen=True)
class ComparisonReport:
    """Terminal growth rates of every strategy across paths, with the
    unpaired MC standard errors and analytic reference rates."""

    horizon: float
    paths: int
    strategies: dict
    analytic: RateReport
    notices: tuple = ()

    def rate_gap(self, a, b):
        """Mean rate difference a - b with the quadrature stderr."""
        sa, sb = self.strategies[a], self.strategies[b]
        return sa.mean - sb.mean, math.hypot(sa.stderr, sb.stderr)

    def to_json_dict(self):
        gap = {}
        if "growth_optimal" in self.strategies and "universal" in self.strategies:
            g, se = self.rate_gap("growth_optimal", "universal")
            gap = {"growth_optimal_minus_universal": g, "gap_stderr": se}
        return {
            "horizon": self.horizon,
            "paths": self.paths,
            "strategies": {k: v.to_json_dict() for k, v in self.strategies.items()},
            "analytic": self.analytic.to_json_dict(),
            "notices": list(self.notices),
            **gap,
        }


def compare_strategies(params, out: SimOutput, measure=None, mc_simplex=4096,
                       seed=0):
    """Run every applicable strategy on every stored path; returns the
    cross-path rate report plus the path-0 wealth tracks for export."""
    paths = out.cfg.paths
    T = out.horizon
    notices = []
    tracks = {}
    rates = {}

    def add(name, per_path_tracks):
        tracks[name] = per_path_tracks[0]
        rates[name] = StrategyStats(
            np.array([tr.terminal_rate for tr in per_path_tracks])
        )

    add("market", [market_wealth(out, p) for p in range(paths)])
    add("equal", [wealth_constant(PortfolioWeights.equal(params.n), out, p)
                  for p in range(paths)])
    star = []
    for p in range(paths):
        w, _ = _target_at(out, T, p)
        star.append(wealth_constant(w, out, p))
    add("target_star", star)
    if measure is not None:
        pibar = asymptotic_target(measure, params)
        add("asym_target", [wealth_constant(pibar, out, p) for p in range(paths)])
    else:
        notices.append("asym_target omitted: no exact invariant measure")
    add("universal", [universal_portfolio(out, mc_simplex, (seed, p), p)[1]
                      for p in range(paths)])
    if params.rho_is_zero:
        add("growth_optimal", [growth_optimal(params, out, p)[1]
                               for p in range(paths)])
    else:
        notices.append("growth_optimal omitted: rho != 0")
    return ComparisonReport(
        horizon=T,
        paths=paths,
        strategies=rates,
        analytic=longrun_rates(params, measure),
        notices=tuple(notices),
    ), tracks
