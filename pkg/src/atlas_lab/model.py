"""Model constants and the standing assumptions.

An n-stock market of log-capitalizations Y follows

    dY_i = (g_{rank(i)} + gamma_i + gamma) dt + (s_p sqrt(dt)-noise)_i,

where p is the current chamber (ordering) and s_p = diag(sigma ranked back to
names) + rho. Everything downstream assumes the parameter set passed
validate(); the skew-symmetry hypotheses (rho = 0, linearly growing
sigma_k^2) additionally gate the closed-form invariant measure.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import StructuralError
from .ranks import Permutation, enumerate_permutations

__all__ = [
    "DRIFT_SUM_TOL",
    "SSC_TOL",
    "PD_MIN_EIG",
    "ModelParams",
    "ValidationReport",
    "SkewSymmetryCheck",
    "validate",
    "drift_vector",
    "diffusion_matrix",
    "reflection_matrix",
    "gap_covariance",
    "is_skew_symmetric",
    "atlas_g_rank",
    "linear_sigma_sq",
]

DRIFT_SUM_TOL = 1e-12      # |sum g + sum gamma_i| must not exceed this
SSC_TOL = 1e-10            # skew-symmetry residual bound
PD_MIN_EIG = 1e-10         # definiteness threshold on symmetrized s_p
_PD_EXHAUSTIVE_MAX = 8     # full-group definiteness sweep up to this n
_PD_SAMPLE = 10_000        # sampled permutations beyond that


def _vector(x, n, label):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise StructuralError(f"{label} must have shape ({n},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise StructuralError(f"non-finite entries in {label}")
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All model constants plus the initial log-capitalizations.

    Fields
    ------
    n : number of stocks, n >= 2
    gamma : common drift
    gamma_name : per-name drifts gamma_i, length n
    g_rank : per-rank drifts g_k, length n (rank 1 = largest stock)
    sigma_rank : per-rank volatilities sigma_k > 0, length n
    rho : n x n name-level volatility loadings
    y0 : initial log-capitalizations, length n
    """

    n: int
    gamma: float
    gamma_name: np.ndarray
    g_rank: np.ndarray
    sigma_rank: np.ndarray
    rho: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None

    def __post_init__(self):
        n = int(self.n)
        if n < 2:
            raise StructuralError(f"n must be >= 2, got {n}")
        object.__setattr__(self, "n", n)
        g = float(self.gamma)
        if not np.isfinite(g):
            raise StructuralError("gamma must be finite")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "gamma_name", _vector(self.gamma_name, n, "gamma_name"))
        object.__setattr__(self, "g_rank", _vector(self.g_rank, n, "g_rank"))
        object.__setattr__(self, "sigma_rank", _vector(self.sigma_rank, n, "sigma_rank"))
        rho = np.zeros((n, n)) if self.rho is None else np.asarray(self.rho, dtype=np.float64)
        if rho.shape != (n, n):
            raise StructuralError(f"rho must have shape ({n},{n}), got {rho.shape}")
        if not np.all(np.isfinite(rho)):
            raise StructuralError("non-finite entries in rho")
        rho = rho.copy()
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        y0 = np.zeros(n) if self.y0 is None else self.y0
        object.__setattr__(self, "y0", _vector(y0, n, "y0"))

    @property
    def rho_is_zero(self):
        return not np.any(self.rho)

    @property
    def sigma_sq(self):
        return self.sigma_rank ** 2

    def to_dict(self):
        return {
            "n": self.n,
            "gamma": self.gamma,
            "gamma_name": self.gamma_name,
            "g_rank": self.g_rank,
            "sigma_rank": self.sigma_rank,
            "rho": self.rho,
            "y0": self.y0,
        }


def atlas_g_rank(n, g):
    """Rank drifts of the Atlas configuration: -g everywhere, (n-1)g at the bottom."""
    out = np.full(n, -float(g))
    out[-1] = (n - 1) * float(g)
    return out


def linear_sigma_sq(n, base, slope):
    """sigma_k^2 = base + slope*k for k = 1..n (must stay positive)."""
    s2 = base + slope * np.arange(1, n + 1, dtype=np.float64)
    if np.any(s2 <= 0):
        raise StructuralError("linear variance profile is not positive")
    return s2


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of every standing assumption, plus the evidence.

    stability_margin is the largest partial sum over ell of
    (g_1+..+g_ell) + (ell largest gamma_i); strictly negative iff the
    stability condition holds for every chamber. min_eigenvalue is the
    smallest eigenvalue of any symmetrized s_p inspected;
    definiteness_mode records whether the sweep was exhaustive or sampled.
    """

    drift_sum_ok: bool
    sigma_positive_ok: bool
    stability_ok: bool
    definiteness_ok: bool
    drift_sum: float
    stability_margin: float
    min_eigenvalue: float
    definiteness_mode: str

    @property
    def stable(self):
        return (
            self.drift_sum_ok
            and self.sigma_positive_ok
            and self.stability_ok
            and self.definiteness_ok
        )

    def failures(self):
        out = []
        if not self.drift_sum_ok:
            out.append(f"drift sums do not cancel: sum g + sum gamma_i = {self.drift_sum:g}")
        if not self.sigma_positive_ok:
            out.append("some sigma_k <= 0")
        if not self.stability_ok:
            out.append(f"stability margin not negative: {self.stability_margin:g}")
        if not self.definiteness_ok:
            out.append(
                f"diffusion matrix not positive-definite "
                f"(min eigenvalue {self.min_eigenvalue:g}, {self.definiteness_mode})"
            )
        return out

    def to_dict(self):
        return {
            "stable": self.stable,
            "drift_sum_ok": self.drift_sum_ok,
            "sigma_positive_ok": self.sigma_positive_ok,
            "stability_ok": self.stability_ok,
            "definiteness_ok": self.definiteness_ok,
            "drift_sum": self.drift_sum,
            "stability_margin": self.stability_margin,
            "min_eigenvalue": self.min_eigenvalue,
            "definiteness_mode": self.definiteness_mode,
        }


def _stability_margin(params):
    # The chamber maximizing each partial sum assigns the ell largest
    # gamma_i to the top ranks, so only that ordering needs checking.
    gam_desc = np.sort(params.gamma_name)[::-1]
    partial = np.cumsum(params.g_rank + gam_desc)[: params.n - 1]
    return float(partial.max())


def _min_eig_blocks(sigma, rho_sym, blocks):
    # blocks: 0-based (B, n) rank_to_name arrays; batch-eigensolve the
    # symmetrized s_p for each row
    worst = np.inf
    for block in blocks:
        inv = np.argsort(block, axis=1)            # name -> rank
        diag = sigma[inv]                          # sigma at each name's rank
        mats = np.broadcast_to(rho_sym, (block.shape[0],) + rho_sym.shape).copy()
        idx = np.arange(rho_sym.shape[0])
        mats[:, idx, idx] += diag
        worst = min(worst, float(np.linalg.eigvalsh(mats)[:, 0].min()))
    return worst


def _definiteness(params):
    n = params.n
    sigma = params.sigma_rank
    if params.rho_is_zero:
        # Every s_p is diagonal with entries sigma_k > 0; the minimum
        # eigenvalue over the whole group is min sigma_k, no sweep needed.
        return float(sigma.min()), "exhaustive"
    rho_sym = (params.rho + params.rho.T) / 2.0
    if n <= _PD_EXHAUSTIVE_MAX:
        from .ranks import permutation_blocks

        return _min_eig_blocks(sigma, rho_sym, permutation_blocks(n)), "exhaustive"
    # sampled sweep: seeded draws plus the two extreme pairings of sorted
    # sigma against sorted diag(rho)
    rng = np.random.default_rng(0)
    sample = np.argsort(rng.random((_PD_SAMPLE, n)), axis=1).astype(np.int8)
    rho_diag_order = np.argsort(np.diag(params.rho), kind="stable")
    extremes = np.empty((2, n), dtype=np.int8)
    sig_order = np.argsort(sigma, kind="stable")
    # smallest sigma on largest rho_ii and the reverse pairing
    extremes[0, sig_order] = rho_diag_order[::-1]
    extremes[1, sig_order] = rho_diag_order
    worst = _min_eig_blocks(sigma, rho_sym, [sample, extremes])
    return worst, "sampled"


def validate(params):
    """Check every standing assumption; returns a ValidationReport."""
    drift_sum = float(params.g_rank.sum() + params.gamma_name.sum())
    sigma_ok = bool(np.all(params.sigma_rank > 0))
    margin = _stability_margin(params)
    if sigma_ok:
        min_eig, mode = _definiteness(params)
    else:
        min_eig, mode = float(params.sigma_rank.min()), "exhaustive"
    return ValidationReport(
        drift_sum_ok=abs(drift_sum) <= DRIFT_SUM_TOL,
        sigma_positive_ok=sigma_ok,
        stability_ok=margin < 0,
        definiteness_ok=min_eig > PD_MIN_EIG,
        drift_sum=drift_sum,
        stability_margin=margin,
        min_eigenvalue=min_eig,
        definiteness_mode=mode,
    )


def drift_vector(params, p: Permutation):
    """Per-name drift in chamber p: g_{rank of i} + gamma_i + gamma."""
    ranks = p.inverse_zero_based()
    return params.g_rank[ranks] + params.gamma_name + params.gamma


def diffusion_matrix(params, p: Permutation):
    """Volatility loading s_p = diag(sigma at each name's rank) + rho."""
    ranks = p.inverse_zero_based()
    return np.diag(params.sigma_rank[ranks]) + params.rho


def reflection_matrix(n):
    """Reflection matrix of the gap process: tridiagonal (-1/2, 1, -1/2)."""
    m = np.eye(n - 1)
    off = -0.5 * np.eye(n - 1, k=1)
    return m + off + off.T


def gap_covariance(params):
    """Covariance rate of the gap process when rho = 0.

    Tridiagonal: diagonal sigma_k^2 + sigma_{k+1}^2, off-diagonals
    -sigma_{k+1}^2 (upper) and -sigma_k^2 (lower, by symmetry the same
    entries).
    """
    s2 = params.sigma_sq
    n = params.n
    a = np.zeros((n - 1, n - 1))
    idx = np.arange(n - 1)
    a[idx, idx] = s2[:-1] + s2[1:]
    a[idx[:-1], idx[:-1] + 1] = -s2[1:-1]
    a[idx[:-1] + 1, idx[:-1]] = -s2[1:-1]
    return a


class SkewSymmetryCheck(NamedTuple):
    ok: bool
    residual: float
    failed_hypothesis: Optional[str]


def is_skew_symmetric(params):
    """Test the skew-symmetry condition that yields the product-form law.

    Builds the gap covariance A, D = diag(A), H = I - R (R the reflection
    matrix) and returns the max-abs entry of 2D - HD - DH - 2A. Holds exactly
    iff sigma_k^2 grows linearly in k; requires rho = 0, and returns
    immediately (residual NaN) when it is not.
    """
    if not params.rho_is_zero:
        return SkewSymmetryCheck(False, float("nan"), "name-based correlations present (rho != 0)")
    a = gap_covariance(params)
    d = np.diag(np.diag(a))
    h = np.eye(params.n - 1) - reflection_matrix(params.n)
    resid = float(np.abs(2 * d - h @ d - d @ h - 2 * a).max())
    if resid < SSC_TOL:
        return SkewSymmetryCheck(True, resid, None)
    return SkewSymmetryCheck(False, resid, "variance increments sigma_{k+1}^2 - sigma_k^2 not constant")
