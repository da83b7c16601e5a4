"""Capital distribution curve analytics.

The curve plots log ranked market weight against log rank. Under the
stationary gap law everything about its expected shape is a functional of
the per-chamber exponential rates, so this module mixes closed-form slope
and curvature formulas with Monte Carlo of the stationary law itself. The
stationary densities of ranked weights (plain and logarithmic) are also
here; they are evaluated in log space by streaming over enumeration blocks.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._util import CSV_FLOAT_FMT, write_csv
from .errors import CapacityError, DomainError, StructuralError
from .invariant import (
    InvariantMeasure,
    _block_lambda,
    _lambda_denominator,
    _sample_batch,
    require_hypotheses,
)
from .ranks import EXACT_ENUM_CAP, permutation_blocks

__all__ = [
    "SIGN_TOL",
    "KConvexity",
    "ConvexityReport",
    "CurveReport",
    "MixedExponentialCurve",
    "expected_slope",
    "convexity_criterion",
    "expected_curve_mc",
    "weight_density",
    "log_weight_density",
    "mixed_exponential_curve",
]

SIGN_TOL = 1e-12         # |d| below this counts as zero in sign tallies
_MC_CHUNK = 1 << 15


def _chord_lengths(n):
    # log(k+1) - log(k) for k = 1..n-1
    k = np.arange(1, n)
    return np.log1p(1.0 / k)


def expected_slope(measure: InvariantMeasure, k):
    """Expected chord slope of the curve between ranks k and k+1,

        -E[Xi_k] / (log(k+1) - log k),

    always negative."""
    measure._need_exact()
    n = measure.n
    if not 1 <= k <= n - 1:
        raise StructuralError(f"k must be in 1..{n - 1}, got {k}")
    return -measure.gap_means[k - 1] / math.log1p(1.0 / k)


@dataclass(frozen=True)
class KConvexity:
    """Sign summary of d_{p,k} = lambda_{p,k+1} L_{k+1} - lambda_{p,k} L_k
    over all chambers p, for one interior rank k."""

    k: int
    classification: str          # "convex" | "concave" | "indeterminate"
    d_min: float
    d_max: float
    frac_positive: float
    frac_negative: float

    def to_json_dict(self):
        return {
            "k": self.k,
            "classification": self.classification,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "frac_positive": self.frac_positive,
            "frac_negative": self.frac_negative,
        }


@dataclass(frozen=True)
class ConvexityReport:
    n: int
    per_k: tuple
    overall: str

    def classification_at(self, k):
        return self.per_k[k - 1].classification

    def to_json_dict(self):
        return {
            "n": self.n,
            "overall": self.overall,
            "per_k": [e.to_json_dict() for e in self.per_k],
        }


def convexity_criterion(params):
    """Classify the expected curve per interior rank by the sign of

        d_{p,k} = lambda_{p,k+1} log(1 + 1/(k+1)) - lambda_{p,k} log(1 + 1/k)

    over every chamber p: convex when every d is >= 0, concave when every d
    is <= 0, indeterminate when the sign depends on p. Sufficient, not
    necessary, since it classifies each chamber's conditional curve rather
    than the theta-weighted mixture.
    """
    require_hypotheses(params)
    n = params.n
    if n > EXACT_ENUM_CAP:
        raise CapacityError(
            f"criterion enumerates all {n}! chambers; supported up to n={EXACT_ENUM_CAP}"
        )
    L = _chord_lengths(n)
    g, gamma, denom = params.g_rank, params.gamma_name, _lambda_denominator(params)
    m = n - 2
    d_min = np.full(m, np.inf)
    d_max = np.full(m, -np.inf)
    pos = np.zeros(m, dtype=np.int64)
    neg = np.zeros(m, dtype=np.int64)
    total = 0
    for block in permutation_blocks(n):
        lam = _block_lambda(g, gamma, denom, block)
        d = lam[:, 1:] * L[1:] - lam[:, :-1] * L[:-1]
        np.minimum(d_min, d.min(axis=0), out=d_min)
        np.maximum(d_max, d.max(axis=0), out=d_max)
        pos += (d > SIGN_TOL).sum(axis=0)
        neg += (d < -SIGN_TOL).sum(axis=0)
        total += block.shape[0]
    per_k = []
    for j in range(m):
        if d_min[j] >= -SIGN_TOL:
            cls = "convex"
        elif d_max[j] <= SIGN_TOL:
            cls = "concave"
        else:
            cls = "indeterminate"
        per_k.append(
            KConvexity(
                k=j + 1,
                classification=cls,
                d_min=float(d_min[j]),
                d_max=float(d_max[j]),
                frac_positive=pos[j] / total,
                frac_negative=neg[j] / total,
            )
        )
    kinds = {e.classification for e in per_k}
    if kinds <= {"convex"}:
        overall = "convex"
    elif kinds == {"concave"}:
        overall = "concave"
    else:
        overall = "indeterminate"
    return ConvexityReport(n=n, per_k=tuple(per_k), overall=overall)


@dataclass(frozen=True)
class CurveReport:
    """Monte Carlo expected curve with the analytic slopes alongside.

    e_log_weight[k-1] estimates E[log mu_(k)]; slopes[k-1] is the analytic
    expected chord slope between ranks k and k+1; convexity is the
    per-interior-rank criterion report (None above the enumeration cap is
    impossible here since the measure is exact).
    """

    n: int
    samples: int
    seed: object
    e_log_weight: np.ndarray
    stderr: np.ndarray
    slopes: np.ndarray
    convexity: ConvexityReport

    @property
    def initial_value(self):
        """E[log mu_(1)], the curve's left endpoint."""
        return float(self.e_log_weight[0])

    def to_csv(self, path):
        header = ["rank", "log_rank", "E_log_weight", "stderr", "slope",
                  "convexity_class"]
        rows = []
        for k in range(1, self.n + 1):
            rows.append([
                k,
                math.log(k),
                self.e_log_weight[k - 1],
                self.stderr[k - 1],
                self.slopes[k - 1] if k < self.n else "",
                self.convexity.classification_at(k) if k <= self.n - 2 else "",
            ])
        write_csv(path, header, rows)

    def to_gnuplot(self, path):
        # bare two-column (log rank, expected log weight) for plotting
        lines = [
            f"{math.log(k):{CSV_FLOAT_FMT}} {self.e_log_weight[k - 1]:{CSV_FLOAT_FMT}}"
            for k in range(1, self.n + 1)
        ]
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")

    def to_json_dict(self):
        return {
            "n": self.n,
            "samples": self.samples,
            "e_log_weight": self.e_log_weight,
            "stderr": self.stderr,
            "slopes": self.slopes,
            "initial_value": self.initial_value,
            "convexity": self.convexity.to_json_dict(),
        }


def expected_curve_mc(measure: InvariantMeasure, samples, seed):
    """Estimate E[log mu_(k)] by sampling the stationary law directly:
    draw (p, Xi), rebuild ranked log weights, and average.

    Each sample's weights are checked to sum to one before it is used.
    """
    measure._need_exact()
    if samples < 1:
        raise StructuralError("need at least one sample")
    n = measure.n
    rng = np.random.Generator(np.random.Philox(key=seed))
    sums = np.zeros(n)
    sqsums = np.zeros(n)
    left = samples
    while left > 0:
        take = min(_MC_CHUNK, left)
        _, _, xi = _sample_batch(measure, take, rng)
        z = np.zeros((take, n))
        z[:, :-1] = np.cumsum(xi[:, ::-1], axis=1)[:, ::-1]
        lse = np.logaddexp.reduce(z, axis=1)
        logmu = z - lse[:, None]
        total = np.exp(logmu).sum(axis=1)
        if np.abs(total - 1.0).max() > 1e-12:
            raise AssertionError("sampled weights do not sum to 1")
        sums += logmu.sum(axis=0)
        sqsums += (logmu ** 2).sum(axis=0)
        left -= take
    mean = sums / samples
    if samples > 1:
        var = (sqsums - samples * mean ** 2) / (samples - 1)
        stderr = np.sqrt(np.maximum(var, 0.0) / samples)
    else:
        stderr = np.zeros(n)
    if np.any(np.diff(mean) >= 0):
        raise AssertionError("expected log weights must decrease in rank")
    slopes = np.array([expected_slope(measure, k) for k in range(1, n)])
    return CurveReport(
        n=n,
        samples=samples,
        seed=seed,
        e_log_weight=mean,
        stderr=stderr,
        slopes=slopes,
        convexity=convexity_criterion(measure.params),
    )


def _ranked_weight_logs(measure, m):
    """Validate the n-1 largest ranked weights, return log m_1..log m_n."""
    n = measure.n
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (n - 1,):
        raise StructuralError(f"m must have shape ({n - 1},), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError("non-finite ranked weights")
    if m[-1] <= 0 or m[0] >= 1 or np.any(np.diff(m) > 0):
        raise DomainError("need 0 < m_{n-1} <= ... <= m_1 < 1")
    last = 1.0 - m.sum()
    if last <= 0 or last > m[-1]:
        raise DomainError(
            f"implied smallest weight {last:.6g} must lie in (0, m_{n-1}]"
        )
    return np.log(np.append(m, last))


def _stream_lse(measure, exponent_of_block):
    """log sum over all chambers of exp(exponent), one enumeration block at
    a time; exponent_of_block maps a lambda block (B, n-1) to (B,)."""
    params = measure.params
    g, gamma, denom = params.g_rank, params.gamma_name, _lambda_denominator(params)
    big = -np.inf
    acc = 0.0
    for block in permutation_blocks(params.n):
        expo = exponent_of_block(_block_lambda(g, gamma, denom, block))
        mx = expo.max()
        s = np.exp(expo - mx).sum()
        if mx > big:
            acc = acc * math.exp(big - mx) + s
            big = mx
        else:
            acc += s * math.exp(mx - big)
    return big + math.log(acc)


def weight_density(measure: InvariantMeasure, m):
    """Stationary density of the n-1 largest ranked market weights,

        sum_p theta_p prod_k lambda_{p,k} prod_{j<=n} m_j^-(lambda_{p,j}-lambda_{p,j-1}+1),

    with lambda_{p,0} = lambda_{p,n} = 0 and m_n implied by normalization."""
    measure._need_exact()
    logm = _ranked_weight_logs(measure, m)

    def exponent(lam):
        # per chamber: log theta_p + sum_k log lambda - sum_j coef_j log m_j
        loglam = np.log(lam).sum(axis=1)
        coef = np.empty((lam.shape[0], measure.n))
        coef[:, 0] = lam[:, 0] + 1.0
        coef[:, 1:-1] = lam[:, 1:] - lam[:, :-1] + 1.0
        coef[:, -1] = 1.0 - lam[:, -1]
        return (-loglam - measure.log_norm) + loglam - coef @ logm

    return math.exp(_stream_lse(measure, exponent))


def log_weight_density(measure: InvariantMeasure, c):
    """Stationary density of the n-1 largest log ranked weights c = log m.

    Obtained from the gap law by the change of variables c_j = Z_j with the
    normalization constraint absorbed into c_n: the exponent telescopes to
    -(sum_j (lambda_j - lambda_{j-1}) c_j) + (lambda_{n-1} - 1) c_n with
    lambda_0 = 0, the trailing -c_n being the Jacobian of the constraint.
    """
    measure._need_exact()
    n = measure.n
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (n - 1,):
        raise StructuralError(f"c must have shape ({n - 1},), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DomainError("non-finite log weights")
    if c[0] >= 0 or np.any(np.diff(c) > 0):
        raise DomainError("need c_1 < 0 and c nonincreasing")
    tail = 1.0 - np.exp(c).sum()
    if tail <= 0:
        raise DomainError("log weights exceed total capitalization")
    cn = math.log(tail)
    if cn > c[-1]:
        raise DomainError(f"implied c_n = {cn:.6g} must not exceed c_{n-1}")

    def exponent(lam):
        logw = -np.log(lam).sum(axis=1)
        diff = np.empty_like(lam)
        diff[:, 0] = lam[:, 0]
        diff[:, 1:] = lam[:, 1:] - lam[:, :-1]
        return (
            (logw - measure.log_norm)
            + np.log(lam).sum(axis=1)
            - diff @ c
            + (lam[:, -1] - 1.0) * cn
        )

    return math.exp(_stream_lse(measure, exponent))


@dataclass(frozen=True)
class MixedExponentialCurve:
    """phi(x) = sum_i exp(-alpha_i x) on a grid, with the convexity
    certificate phi'' phi - (phi')^2 = sum_{i<j} (alpha_i - alpha_j)^2
    exp(-(alpha_i + alpha_j) x) checked numerically."""

    alphas: np.ndarray
    x: np.ndarray
    phi: np.ndarray
    log_phi: np.ndarray
    convex: bool
    identity_residual: float


def mixed_exponential_curve(alphas, x_grid):
    """Log-weight curve of the pure hybrid large-n approximation: mixture of
    exponentials in continuous rank; provably convex in x."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size == 0:
        raise StructuralError("alphas must be a nonempty vector")
    if not np.all(np.isfinite(alphas)) or np.any(alphas <= 0):
        raise DomainError("all alphas must be positive")
    x = np.asarray(x_grid, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise StructuralError("x_grid must be a nonempty vector")

    e = np.exp(-np.outer(x, alphas))              # (len(x), len(alphas))
    phi = e.sum(axis=1)
    d1 = -(e * alphas).sum(axis=1)
    d2 = (e * alphas ** 2).sum(axis=1)
    lhs = d2 * phi - d1 ** 2

    i, j = np.triu_indices(alphas.size, k=1)
    if i.size:
        sq = (alphas[i] - alphas[j]) ** 2
        rhs = np.exp(-np.outer(x, alphas[i] + alphas[j])) @ sq
    else:
        rhs = np.zeros_like(x)
    # lhs is a difference of near-equal positives when rates nearly coincide,
    # so its noise floor scales with the summands, not the result
    scale = np.maximum(d2 * phi + d1 ** 2, np.abs(rhs))
    resid = float(np.max(np.abs(lhs - rhs) / np.where(scale > 0, scale, 1.0)))
    if np.any(rhs < 0) or resid > 1e-9:
        raise AssertionError("convexity certificate failed numerically")
    return MixedExponentialCurve(
        alphas=alphas,
        x=x,
        phi=phi,
        log_phi=np.log(phi),
        convex=True,
        identity_residual=resid,
    )
