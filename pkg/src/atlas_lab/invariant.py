"""Stationary law of the gap-and-permutation process under skew symmetry.

For each chamber p the gaps are independent exponentials with rates

    lambda_{p,k} = -4 (sum_{l<=k} g_l + gamma_{p(l)}) / (sigma_k^2 + sigma_{k+1}^2),

and the chamber weights are theta_p proportional to prod_k lambda_{p,k}^{-1}.
Everything is accumulated in log space: at n = 10 the products span many
orders of magnitude (lambda ranges from 8/55 to O(n) already at moderate
n, so raw products underflow long before the cap).

Exact mode enumerates the symmetric group in lexicographic blocks (ranks
module) and reduces block partials in fixed order, so results are bitwise
reproducible for any thread count. Beyond the enumeration cap a Metropolis
chain over adjacent transpositions estimates the occupation matrix.
"""

import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from ._util import resolve_threads, write_csv
from .errors import (
    CapacityError,
    DomainError,
    HypothesisError,
    StabilityError,
    StructuralError,
    UnavailableError,
)
from .model import validate, is_skew_symmetric
from .ranks import (
    EXACT_ENUM_CAP,
    Permutation,
    block_count,
    enumerate_permutations,
    permutation_block,
    permutation_blocks,
)

__all__ = [
    "InvariantMeasure",
    "OccupationMatrix",
    "lambda_vector",
    "chamber_weights",
    "chamber_weights_mcmc",
    "occupation_matrix",
    "equilibrium_residual",
    "gap_density",
    "sample_stationary",
    "top_chambers",
]

_MCMC_BATCHES = 32  # batch-means groups for standard errors


def _lambda_denominator(params):
    s2 = params.sigma_sq
    return s2[:-1] + s2[1:]


def require_hypotheses(params):
    """Gate for every closed-form operation: stability plus skew symmetry."""
    report = validate(params)
    if not report.stable:
        raise StabilityError("; ".join(report.failures()))
    check = is_skew_symmetric(params)
    if not check.ok:
        raise HypothesisError(f"skew symmetry fails: {check.failed_hypothesis}")


def lambda_vector(params, p: Permutation):
    """Exponential gap rates in chamber p; all components must be positive."""
    names = p.to_zero_based()
    partial = np.cumsum(params.g_rank + params.gamma_name[names])[: params.n - 1]
    lam = -4.0 * partial / _lambda_denominator(params)
    if np.any(lam <= 0):
        raise StabilityError(
            f"nonpositive gap rate in chamber {p!r}: partial drift sums must be negative"
        )
    return lam


def _block_lambda(g, gamma, denom, block):
    gb = g[np.newaxis, :] + gamma[block]
    partial = np.cumsum(gb, axis=1)[:, :-1]
    lam = partial * (-4.0 / denom)[np.newaxis, :]
    if lam.min() <= 0:
        raise StabilityError("nonpositive gap rate encountered during enumeration")
    return lam


def _block_stats(g, gamma, denom, block):
    """Per-block partials: (max log-weight, sum, occupation sums, inv-rate sums)."""
    n = block.shape[1]
    lam = _block_lambda(g, gamma, denom, block)
    logw = -np.log(lam).sum(axis=1)
    m = logw.max()
    w = np.exp(logw - m)
    s = w.sum()
    occ = np.empty((n, n))
    names = block.astype(np.intp)
    for k in range(n):
        occ[k] = np.bincount(names[:, k], weights=w, minlength=n)
    inv = (w[:, np.newaxis] / lam).sum(axis=0)
    return m, s, occ, inv


class _LazyPermMap(Mapping):
    """Read-only view {Permutation -> f(params, p)} over the whole group."""

    def __init__(self, params, fn):
        self._params = params
        self._fn = fn
        self._len = math.factorial(params.n)

    def __getitem__(self, p):
        if not isinstance(p, Permutation) or len(p) != self._params.n:
            raise KeyError(p)
        return self._fn(self._params, p)

    def __iter__(self):
        return enumerate_permutations(self._params.n)

    def __len__(self):
        return self._len


def _log_weight(params, p):
    return float(-np.log(lambda_vector(params, p)).sum())


@dataclass(frozen=True)
class InvariantMeasure:
    """Stationary law: gap rates per chamber plus chamber weights.

    Exact mode stores aggregates from one full enumeration (occupation
    matrix, mean gaps, log normalizer, per-block log partial sums for
    sampling); lambda_by_perm and log_weight_by_perm are lazy maps computed
    from the parameters on access. MCMC mode stores estimates with batch-
    means standard errors instead.
    """

    params: object
    mode: str                                  # "exact" | "mcmc"
    theta: np.ndarray                          # (n, n) occupation matrix
    log_norm: Optional[float] = None           # log sum_p prod_j lambda^-1
    gap_means: Optional[np.ndarray] = None     # E[Xi_k] = sum_p theta_p / lambda_pk
    block_log_weights: Optional[np.ndarray] = None  # per enumeration block
    theta_stderr: Optional[np.ndarray] = None  # mcmc only
    iters: Optional[int] = None
    burn_in: Optional[int] = None
    acceptance_rate: Optional[float] = None

    @property
    def n(self):
        return self.params.n

    @property
    def lambda_by_perm(self):
        return _LazyPermMap(self.params, lambda_vector)

    @property
    def log_weight_by_perm(self):
        return _LazyPermMap(self.params, _log_weight)

    def theta_of(self, p: Permutation):
        """Chamber weight theta_p (exact mode)."""
        self._need_exact()
        return math.exp(_log_weight(self.params, p) - self.log_norm)

    def _need_exact(self):
        if self.mode != "exact":
            raise UnavailableError("operation requires an exact-mode measure")

    def to_json_dict(self):
        out = {
            "mode": self.mode,
            "n": self.n,
            "theta": self.theta,
        }
        if self.mode == "exact":
            out["log_norm"] = self.log_norm
            out["gap_means"] = self.gap_means
        else:
            out["theta_stderr"] = self.theta_stderr
            out["iters"] = self.iters
            out["burn_in"] = self.burn_in
            out["acceptance_rate"] = self.acceptance_rate
        return out


@dataclass(frozen=True)
class OccupationMatrix:
    """Doubly stochastic matrix of long-run rank occupation fractions.

    theta[k-1, i-1] is the fraction of time name i holds rank k.
    """

    theta: np.ndarray
    mode: str = "exact"                        # "exact" | "mcmc" | "simulation"
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise StructuralError(f"occupation matrix must be square, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise StructuralError("non-finite occupation entries")
        if t.min() < -1e-9 or t.max() > 1 + 1e-9:
            raise StructuralError("occupation entries must lie in [0, 1]")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)

    @property
    def n(self):
        return self.theta.shape[0]

    def row_sums(self):
        return self.theta.sum(axis=1)

    def col_sums(self):
        return self.theta.sum(axis=0)

    def to_csv(self, path):
        header = ["rank"] + [f"name_{i}" for i in range(1, self.n + 1)]
        rows = []
        for k in range(self.n):
            row = [k + 1] + list(self.theta[k])
            rows.append(row)
        write_csv(path, header, rows)

    def to_json_dict(self):
        out = {"mode": self.mode, "n": self.n, "theta": self.theta}
        if self.stderr is not None:
            out["stderr"] = self.stderr
        return out


def chamber_weights(params, threads=None):
    """Exact invariant measure by full enumeration of the symmetric group.

    One pass accumulates, per lexicographic block: the running normalizer,
    the unnormalized occupation matrix and the mean-gap sums, all in log
    space with a fixed reduction order. Requires n <= the enumeration cap.
    """
    require_hypotheses(params)
    n = params.n
    if n > EXACT_ENUM_CAP:
        raise CapacityError(
            f"n={n} exceeds the exact-enumeration cap {EXACT_ENUM_CAP}; "
            "use chamber_weights_mcmc"
        )
    g = params.g_rank
    gamma = params.gamma_name
    denom = _lambda_denominator(params)

    workers = resolve_threads(threads)
    blocks = permutation_blocks(n)
    if workers == 1 or block_count(n) == 1:
        partials = [_block_stats(g, gamma, denom, b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(
                pool.map(lambda b: _block_stats(g, gamma, denom, b), blocks)
            )

    big = max(m for m, _, _, _ in partials)
    norm = 0.0
    occ = np.zeros((n, n))
    inv = np.zeros(n - 1)
    block_logw = np.empty(len(partials))
    for c, (m, s, occ_c, inv_c) in enumerate(partials):
        scale = math.exp(m - big)
        norm += s * scale
        occ += occ_c * scale
        inv += inv_c * scale
        block_logw[c] = m + math.log(s)

    return InvariantMeasure(
        params=params,
        mode="exact",
        theta=occ / norm,
        log_norm=big + math.log(norm),
        gap_means=inv / norm,
        block_log_weights=block_logw,
    )


def occupation_matrix(measure: InvariantMeasure):
    """Aggregate chamber weights into the doubly stochastic theta_{k,i}."""
    return OccupationMatrix(
        theta=measure.theta,
        mode=measure.mode,
        stderr=measure.theta_stderr,
    )


def equilibrium_residual(params, theta):
    """Per-name residual sum_k theta_{k,i} g_k + gamma_i; zero at equilibrium."""
    t = theta.theta if isinstance(theta, OccupationMatrix) else np.asarray(theta)
    if t.shape != (params.n, params.n):
        raise StructuralError(f"theta shape {t.shape} does not match n={params.n}")
    return params.g_rank @ t + params.gamma_name


def gap_density(measure: InvariantMeasure, z):
    """Stationary gap density: norm^-1 sum_p exp(-<lambda_p, z>)."""
    measure._need_exact()
    params = measure.params
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.n - 1,):
        raise StructuralError(f"z must have shape ({params.n - 1},), got {z.shape}")
    if np.any(z < 0):
        raise DomainError("gap vector must be nonnegative")
    g, gamma, denom = params.g_rank, params.gamma_name, _lambda_denominator(params)
    big = -np.inf
    acc = 0.0
    for block in permutation_blocks(params.n):
        expo = -_block_lambda(g, gamma, denom, block) @ z
        m = expo.max()
        s = np.exp(expo - m).sum()
        if m > big:
            acc = acc * math.exp(big - m) + s
            big = m
        else:
            acc += s * math.exp(m - big)
    return math.exp(big + math.log(acc) - measure.log_norm)


def _sample_batch(measure: InvariantMeasure, size, rng):
    """Vectorized draws of (chamber row, rates, gaps) from the exact law.

    Chambers are drawn block-first from the stored per-block log weights,
    then uniformly-by-weight inside each regenerated block, so no n!-sized
    table is ever materialized.
    """
    measure._need_exact()
    params = measure.params
    n = params.n
    g, gamma, denom = params.g_rank, params.gamma_name, _lambda_denominator(params)
    blw = measure.block_log_weights
    probs = np.exp(blw - blw.max())
    probs /= probs.sum()
    counts = rng.multinomial(size, probs)
    rows = np.empty((size, n), dtype=np.int8)
    lams = np.empty((size, n - 1))
    pos = 0
    for c in np.flatnonzero(counts):
        block = permutation_block(n, int(c))
        lam = _block_lambda(g, gamma, denom, block)
        logw = -np.log(lam).sum(axis=1)
        w = np.exp(logw - logw.max())
        cdf = np.cumsum(w)
        take = counts[c]
        idx = np.searchsorted(cdf, rng.random(take) * cdf[-1], side="right")
        idx = np.minimum(idx, len(cdf) - 1)
        rows[pos:pos + take] = block[idx]
        lams[pos:pos + take] = lam[idx]
        pos += take
    xi = rng.standard_exponential((size, n - 1)) / lams
    return rows, lams, xi


def sample_stationary(measure: InvariantMeasure, rng):
    """One draw (p, Xi): chamber p with probability theta_p, then
    independent Exponential(lambda_{p,j}) gaps."""
    rows, _, xi = _sample_batch(measure, 1, rng)
    return Permutation.from_zero_based(rows[0]), xi[0]


def top_chambers(measure: InvariantMeasure, k=1000):
    """The k highest-weight chambers as (Permutation, theta_p), sorted."""
    measure._need_exact()
    params = measure.params
    n = params.n
    g, gamma, denom = params.g_rank, params.gamma_name, _lambda_denominator(params)
    best_logw = None
    best_rows = None
    for block in permutation_blocks(n):
        lam = _block_lambda(g, gamma, denom, block)
        logw = -np.log(lam).sum(axis=1)
        if len(logw) > k:
            part = np.argpartition(-logw, k - 1)[:k]
        else:
            part = np.arange(len(logw))
        rows = block[part]
        lw = logw[part]
        if best_logw is None:
            best_logw, best_rows = lw, rows
        else:
            best_logw = np.concatenate([best_logw, lw])
            best_rows = np.concatenate([best_rows, rows])
            if len(best_logw) > k:
                keep = np.argpartition(-best_logw, k - 1)[:k]
                best_logw, best_rows = best_logw[keep], best_rows[keep]
    order = np.argsort(-best_logw, kind="stable")
    out = []
    for j in order:
        p = Permutation.from_zero_based(best_rows[j])
        out.append((p, math.exp(best_logw[j] - measure.log_norm)))
    return out


@njit(cache=True)
def _mcmc_chunk(perm, partial, gamma, props, unifs, counts, t0, burn_in, post, n_batches):
    """Advance the adjacent-transposition Metropolis chain over one chunk.

    perm is the 0-based rank_to_name state, partial the cached prefix sums of
    g + gamma over ranks. Swapping ranks j, j+1 changes only partial[j], so
    the acceptance ratio is partial[j] / proposed_partial[j] (denominators of
    the affected lambda cancel; both sums are negative under stability).
    Tallies go into per-batch counts after burn-in.
    """
    n = perm.shape[0]
    acc = 0
    for t in range(props.shape[0]):
        j = props[t]
        s_new = partial[j] - gamma[perm[j]] + gamma[perm[j + 1]]
        ratio = partial[j] / s_new
        if unifs[t] < ratio:
            tmp = perm[j]
            perm[j] = perm[j + 1]
            perm[j + 1] = tmp
            partial[j] = s_new
            acc += 1
        g_step = t0 + t
        if g_step >= burn_in:
            b = ((g_step - burn_in) * n_batches) // post
            for k in range(n):
                counts[b, k, perm[k]] += 1
    return acc


def chamber_weights_mcmc(params, iters, burn_in=None, seed=0):
    """Metropolis estimate of the occupation law for n beyond the exact cap.

    Uniformly random adjacent transpositions; each step is O(1) thanks to the
    cached prefix sums. Standard errors come from batch means over 32 equal
    spans of the post-burn-in chain.
    """
    require_hypotheses(params)
    n = params.n
    iters = int(iters)
    if burn_in is None:
        burn_in = 10 * n * n
    burn_in = int(burn_in)
    if iters <= burn_in:
        raise StructuralError(f"iters ({iters}) must exceed burn_in ({burn_in})")
    post = iters - burn_in

    perm = np.arange(n, dtype=np.int64)
    partial = np.cumsum(params.g_rank + params.gamma_name[perm])[: n - 1].copy()
    counts = np.zeros((_MCMC_BATCHES, n, n), dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(key=seed))
    accepted = 0
    chunk = 4_000_000
    done = 0
    while done < iters:
        take = min(chunk, iters - done)
        props = rng.integers(0, n - 1, size=take)
        unifs = rng.random(take)
        accepted += _mcmc_chunk(
            perm, partial, params.gamma_name, props, unifs,
            counts, done, burn_in, post, _MCMC_BATCHES,
        )
        done += take

    edges = np.ceil(np.arange(_MCMC_BATCHES + 1) * post / _MCMC_BATCHES).astype(np.int64)
    lengths = np.diff(edges)
    theta = counts.sum(axis=0) / post
    fracs = counts / lengths[:, np.newaxis, np.newaxis]
    stderr = fracs.std(axis=0, ddof=1) / math.sqrt(_MCMC_BATCHES)
    return InvariantMeasure(
        params=params,
        mode="mcmc",
        theta=theta,
        theta_stderr=stderr,
        iters=iters,
        burn_in=burn_in,
        acceptance_rate=accepted / iters,
    )
