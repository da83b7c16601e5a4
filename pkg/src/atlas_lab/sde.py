"""Euler Monte Carlo engine for the full rank/name SDE system.

The state is advanced on the log scale,

    Y <- Y + G_p dt + s_p xi sqrt(dt),        xi ~ N(0, I_n),

with the chamber p resolved once per step from the pre-step state (intra-step
rank changes are ignored; O(dt) weak error, standard for piecewise-constant
coefficients). Occupation tallies and the integrated covariance
A(t) = int a(s) ds, a = s_p s_p^T, are accumulated at full resolution;
trajectories are stored on a thinned grid.

Reproducibility: each path consumes one counter-based Philox stream keyed
(master seed, path index) in fixed blocks, so results are bitwise identical
for a given SimConfig regardless of scheduling, and other consumers (the
growth-optimal re-simulation in the portfolio module) can regenerate the
exact same driving noise.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numba import njit

from .errors import PathOverflowError, StructuralError, UnavailableError
from .invariant import OccupationMatrix

__all__ = [
    "OVERFLOW_LIMIT",
    "SimConfig",
    "SimOutput",
    "GrowthRates",
    "CollisionStats",
    "simulate",
    "occupation_estimate",
    "growth_rates",
    "gap_trajectory",
    "collision_stats",
]

OVERFLOW_LIMIT = 1e6     # |Y_i| beyond this aborts the path
NOISE_BLOCK = 1 << 16    # steps of noise generated per chunk


@dataclass(frozen=True)
class SimConfig:
    """Run geometry: horizon, step, path count, seeding, storage policy."""

    horizon: float
    dt: float = 1e-3
    paths: int = 1
    seed: int = 0
    thin_stride: int = 1
    store_paths: bool = True

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise StructuralError(f"dt must be positive, got {self.dt}")
        if self.horizon < self.dt:
            raise StructuralError("horizon must be at least one step")
        if self.paths < 1:
            raise StructuralError("need at least one path")
        if self.thin_stride < 1:
            raise StructuralError("thin_stride must be >= 1")

    @property
    def steps(self):
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class SimOutput:
    """Everything a run produced; immutable once returned.

    y and a are (paths, stored, n) and (paths, stored, n, n) on the thinned
    grid (including t = 0 and t = T), or None for summaries-only runs.
    tallies counts pre-step chamber membership: entry (k, i) is the number of
    steps name i+1 spent at rank k+1, summed over paths.
    """

    params: object
    cfg: SimConfig
    steps: int
    tallies: np.ndarray
    terminal_y: np.ndarray
    terminal_a: np.ndarray
    times: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None

    @property
    def horizon(self):
        return self.steps * self.cfg.dt

    def _need_paths(self):
        if self.y is None:
            raise UnavailableError("run stored summaries only (store_paths=False)")


@njit(cache=True, nogil=True)
def _euler_block(y, noise, dt, sqdt, g, gam_total, sigma, rho, rrt, use_rho,
                 limit, tallies, a_run, store, stride, y_store, a_store, s0):
    n = y.shape[0]
    order = np.empty(n, np.int64)
    rank_of = np.empty(n, np.int64)
    for t in range(noise.shape[0]):
        s = s0 + t
        # rank the current state: insertion sort, ties to the lowest name
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

        if store and s % stride == 0:
            row = s // stride
            for i in range(n):
                y_store[row, i] = y[i]
                for j in range(n):
                    a_store[row, i, j] = a_run[i, j]

        # pre-step chamber feeds the tallies, the covariance and the step
        for k in range(n):
            tallies[k, order[k]] += 1
        if use_rho:
            for i in range(n):
                si = sigma[rank_of[i]]
                a_run[i, i] += (si * si + 2.0 * si * rho[i, i] + rrt[i, i]) * dt
                for j in range(i + 1, n):
                    inc = (si * rho[j, i] + sigma[rank_of[j]] * rho[i, j] + rrt[i, j]) * dt
                    a_run[i, j] += inc
                    a_run[j, i] += inc
            for i in range(n):
                z = sigma[rank_of[i]] * noise[t, i]
                for j in range(n):
                    z += rho[i, j] * noise[t, j]
                y[i] += (g[rank_of[i]] + gam_total[i]) * dt + z * sqdt
        else:
            for i in range(n):
                si = sigma[rank_of[i]]
                a_run[i, i] += si * si * dt
                y[i] += (g[rank_of[i]] + gam_total[i]) * dt + si * noise[t, i] * sqdt
        for i in range(n):
            if not (-limit <= y[i] <= limit):
                return s
    return -1


def noise_blocks(seed, path, steps, n):
    """The fixed per-path noise stream, yielded in NOISE_BLOCK-step chunks."""
    rng = np.random.Generator(np.random.Philox(key=(seed, path)))
    done = 0
    while done < steps:
        take = min(NOISE_BLOCK, steps - done)
        yield rng.standard_normal((take, n))
        done += take


def simulate(params, cfg: SimConfig):
    """Run the Euler scheme; returns tallies, terminal state and (optionally)
    thinned trajectories with the integrated covariance."""
    n = params.n
    steps = cfg.steps
    stride = cfg.thin_stride
    if cfg.store_paths and steps % stride != 0:
        raise StructuralError(
            f"steps ({steps}) must be divisible by thin_stride ({stride}) "
            "when storing paths"
        )
    stored = steps // stride + 1 if cfg.store_paths else 1
    use_rho = not params.rho_is_zero
    rho = np.ascontiguousarray(params.rho)
    rrt = rho @ rho.T
    gam_total = params.gamma_name + params.gamma
    sqdt = math.sqrt(cfg.dt)

    tallies = np.zeros((n, n), dtype=np.int64)
    terminal_y = np.empty((cfg.paths, n))
    terminal_a = np.empty((cfg.paths, n, n))
    ys = np.empty((cfg.paths, stored, n)) if cfg.store_paths else None
    aas = np.empty((cfg.paths, stored, n, n)) if cfg.store_paths else None

    dummy_y = np.empty((1, n))
    dummy_a = np.empty((1, n, n))
    for path in range(cfg.paths):
        y = params.y0.copy()
        a_run = np.zeros((n, n))
        y_store = ys[path] if cfg.store_paths else dummy_y
        a_store = aas[path] if cfg.store_paths else dummy_a
        s0 = 0
        for noise in noise_blocks(cfg.seed, path, steps, n):
            bad = _euler_block(
                y, noise, cfg.dt, sqdt, params.g_rank, gam_total,
                params.sigma_rank, rho, rrt, use_rho, OVERFLOW_LIMIT,
                tallies, a_run, cfg.store_paths, stride, y_store, a_store, s0,
            )
            if bad >= 0:
                raise PathOverflowError(path, int(bad), OVERFLOW_LIMIT)
            s0 += noise.shape[0]
        if cfg.store_paths:
            y_store[stored - 1] = y
            a_store[stored - 1] = a_run
        terminal_y[path] = y
        terminal_a[path] = a_run

    times = (
        np.arange(stored, dtype=np.float64) * (stride * cfg.dt)
        if cfg.store_paths
        else None
    )
    return SimOutput(
        params=params,
        cfg=cfg,
        steps=steps,
        tallies=tallies,
        terminal_y=terminal_y,
        terminal_a=terminal_a,
        times=times,
        y=ys,
        a=aas,
    )


def occupation_estimate(out: SimOutput):
    """Tallies normalized to the occupation matrix; doubly stochastic exactly."""
    total = out.steps * out.cfg.paths
    return OccupationMatrix(theta=out.tallies / total, mode="simulation")


def _logsumexp(v):
    m = v.max()
    return m + math.log(np.exp(v - m).sum())


@dataclass(frozen=True)
class GrowthRates:
    """Terminal growth rates per path: by name, for the whole market, by rank.

    Under stability all of them converge to the common drift gamma.
    """

    name_rates: np.ndarray    # (paths, n)
    market_rate: np.ndarray   # (paths,)
    rank_rates: np.ndarray    # (paths, n)

    def to_json_dict(self):
        paths = self.market_rate.shape[0]
        scale = math.sqrt(paths) if paths > 1 else 1.0
        return {
            "paths": paths,
            "name_rates_mean": self.name_rates.mean(axis=0),
            "name_rates_stderr": self.name_rates.std(axis=0, ddof=1) / scale
            if paths > 1
            else np.zeros_like(self.name_rates[0]),
            "market_rate_mean": float(self.market_rate.mean()),
            "market_rate_stderr": float(self.market_rate.std(ddof=1) / scale)
            if paths > 1
            else 0.0,
            "rank_rates_mean": self.rank_rates.mean(axis=0),
        }


def growth_rates(out: SimOutput):
    """(1/T) increments of Y_i, of log total capitalization, and of the
    ranked values Z_k, per path."""
    T = out.horizon
    y0 = out.params.y0
    names = (out.terminal_y - y0) / T
    market = np.array(
        [(_logsumexp(yt) - _logsumexp(y0)) / T for yt in out.terminal_y]
    )
    z0 = np.sort(y0)[::-1]
    zt = np.sort(out.terminal_y, axis=1)[:, ::-1]
    ranks = (zt - z0) / T
    return GrowthRates(name_rates=names, market_rate=market, rank_rates=ranks)


def gap_trajectory(out: SimOutput, path=0):
    """Stored gap process of one path: (times, Xi) with Xi >= 0 everywhere."""
    out._need_paths()
    z = np.sort(out.y[path], axis=1)[:, ::-1]
    return out.times, z[:, :-1] - z[:, 1:]


class CollisionStats(NamedTuple):
    pair_fraction: float
    triple_fraction: float


def collision_stats(out: SimOutput, eps):
    """Fractions of stored steps with a near-tie (some gap < eps) and with a
    near-triple (two adjacent gaps < eps simultaneously).

    The triple fraction must vanish faster as eps shrinks; that is the
    numerical counterpart of triple collisions carrying no local time.
    """
    out._need_paths()
    if eps < 0:
        raise StructuralError("eps must be nonnegative")
    pair = 0
    triple = 0
    total = 0
    for path in range(out.cfg.paths):
        z = np.sort(out.y[path], axis=1)[:, ::-1]
        xi = z[:, :-1] - z[:, 1:]
        near = xi < eps
        pair += int(near.any(axis=1).sum())
        if xi.shape[1] >= 2:
            triple += int((near[:, :-1] & near[:, 1:]).any(axis=1).sum())
        total += xi.shape[0]
    return CollisionStats(pair / total, triple / total)
