import math

import numpy as np
import pytest

from atlas_lab.errors import (
    PathOverflowError,
    StructuralError,
    UnavailableError,
)
from atlas_lab.model import ModelParams, atlas_g_rank
from atlas_lab.sde import (
    NOISE_BLOCK,
    OVERFLOW_LIMIT,
    SimConfig,
    collision_stats,
    gap_trajectory,
    growth_rates,
    noise_blocks,
    occupation_estimate,
    simulate,
)


def atlas3(gamma=0.0, gamma_name=(0.0, 0.0, 0.0), sigma=(1.0, 1.0, 1.0),
           rho=None, y0=None):
    return ModelParams(n=3, gamma=gamma, gamma_name=np.array(gamma_name),
                       g_rank=atlas_g_rank(3, 1.0),
                       sigma_rank=np.array(sigma), rho=rho, y0=y0)


class TestSimConfig:
    def test_defaults(self):
        cfg = SimConfig(horizon=10.0)
        assert cfg.dt == 1e-3
        assert cfg.paths == 1
        assert cfg.steps == 10_000

    def test_invalid_rejected(self):
        with pytest.raises(StructuralError):
            SimConfig(horizon=1.0, dt=0.0)
        with pytest.raises(StructuralError):
            SimConfig(horizon=1e-4, dt=1e-3)
        with pytest.raises(StructuralError):
            SimConfig(horizon=1.0, paths=0)
        with pytest.raises(StructuralError):
            SimConfig(horizon=1.0, thin_stride=0)

    def test_stride_must_divide_steps_when_storing(self):
        with pytest.raises(StructuralError):
            simulate(atlas3(), SimConfig(horizon=1.0, dt=1e-3, thin_stride=7))


class TestNoiseBlocks:
    def test_partition_and_shapes(self):
        steps = NOISE_BLOCK + 123
        blocks = list(noise_blocks(0, 0, steps, 3))
        assert [b.shape for b in blocks] == [(NOISE_BLOCK, 3), (123, 3)]

    def test_reproducible_stream(self):
        a = np.concatenate(list(noise_blocks(7, 2, 1000, 4)))
        b = np.concatenate(list(noise_blocks(7, 2, 1000, 4)))
        assert np.array_equal(a, b)

    def test_paths_and_seeds_are_independent_streams(self):
        a = np.concatenate(list(noise_blocks(7, 0, 1000, 4)))
        b = np.concatenate(list(noise_blocks(7, 1, 1000, 4)))
        c = np.concatenate(list(noise_blocks(8, 0, 1000, 4)))
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSimulate:
    def test_driftless_brownian_moments(self):
        p = ModelParams(n=4, gamma=0.0, gamma_name=np.zeros(4),
                        g_rank=np.zeros(4), sigma_rank=np.ones(4))
        cfg = SimConfig(horizon=4.0, dt=1e-3, paths=256, seed=0,
                        store_paths=False)
        out = simulate(p, cfg)
        incr = out.terminal_y - p.y0
        se_mean = math.sqrt(4.0 / 256)
        assert np.abs(incr.mean(axis=0)).max() < 3 * se_mean
        var = incr.var(axis=0, ddof=1)
        se_var = 4.0 * math.sqrt(2 / 255)
        assert np.abs(var - 4.0).max() < 3 * se_var

    def test_bitwise_deterministic(self):
        cfg = SimConfig(horizon=2.0, dt=1e-3, paths=2, seed=3, thin_stride=10)
        a = simulate(atlas3(), cfg)
        b = simulate(atlas3(), cfg)
        assert np.array_equal(a.terminal_y, b.terminal_y)
        assert np.array_equal(a.tallies, b.tallies)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.a, b.a)
        c = simulate(atlas3(), SimConfig(horizon=2.0, dt=1e-3, paths=2, seed=4,
                                         thin_stride=10))
        assert not np.array_equal(a.terminal_y, c.terminal_y)

    def test_summary_run_matches_stored_run(self):
        cfg_full = SimConfig(horizon=1.0, dt=1e-3, paths=2, seed=5)
        cfg_thin = SimConfig(horizon=1.0, dt=1e-3, paths=2, seed=5,
                             store_paths=False)
        full = simulate(atlas3(), cfg_full)
        thin = simulate(atlas3(), cfg_thin)
        assert np.array_equal(full.terminal_y, thin.terminal_y)
        assert np.array_equal(full.tallies, thin.tallies)
        assert thin.y is None and thin.times is None

    def test_initial_state_respected(self):
        y0 = np.array([0.5, -0.2, 0.1])
        out = simulate(atlas3(y0=y0), SimConfig(horizon=0.1, dt=1e-3))
        assert np.array_equal(out.y[0][0], y0)

    def test_tally_counting_identity(self):
        cfg = SimConfig(horizon=3.0, dt=1e-3, paths=3, seed=1,
                        store_paths=False)
        out = simulate(atlas3(gamma_name=(0.2, 0.0, -0.2)), cfg)
        total = cfg.steps * cfg.paths
        assert np.array_equal(out.tallies.sum(axis=1), [total] * 3)
        assert np.array_equal(out.tallies.sum(axis=0), [total] * 3)

    def test_occupation_estimate_exactly_doubly_stochastic(self):
        out = simulate(atlas3(), SimConfig(horizon=2.0, dt=1e-3, paths=2,
                                           store_paths=False))
        occ = occupation_estimate(out)
        assert occ.mode == "simulation"
        assert np.array_equal(occ.row_sums(), np.ones(3))
        assert np.array_equal(occ.col_sums(), np.ones(3))

    def test_pure_rank_occupation_uniform(self):
        out = simulate(atlas3(), SimConfig(horizon=200.0, dt=1e-3, seed=2,
                                           store_paths=False))
        occ = occupation_estimate(out)
        assert np.abs(occ.theta - 1 / 3).max() < 0.05

    def test_overflow_reports_path_and_step(self):
        p = atlas3(gamma=2e5)
        with pytest.raises(PathOverflowError) as exc:
            simulate(p, SimConfig(horizon=20.0, dt=1e-3, store_paths=False))
        assert exc.value.path == 0
        assert 0 < exc.value.step <= 20_000
        assert exc.value.limit == OVERFLOW_LIMIT


class TestIntegratedCovariance:
    def test_diag_matches_tally_weighted_variances(self):
        p = atlas3(gamma_name=(0.2, 0.0, -0.2), sigma=(1.0, 1.2, 1.5))
        cfg = SimConfig(horizon=5.0, dt=1e-3, paths=2, store_paths=False)
        out = simulate(p, cfg)
        # each step adds sigma^2 at the name's current rank, so the terminal
        # diagonal is exactly the tally-weighted sum (up to fp accumulation)
        sig2 = p.sigma_rank ** 2
        pooled = out.terminal_a.sum(axis=0)
        want = (out.tallies * sig2[:, None]).sum(axis=0) * cfg.dt
        assert np.allclose(np.diag(pooled), want, rtol=1e-9)
        assert out.terminal_a.shape == (2, 3, 3)
        assert out.tallies.sum() == cfg.steps * cfg.paths * 3

    def test_equal_variance_diagonal_is_horizon(self):
        out = simulate(atlas3(), SimConfig(horizon=3.0, dt=1e-3,
                                           store_paths=False))
        assert np.allclose(np.diag(out.terminal_a[0]), 3.0, rtol=1e-9)
        assert np.allclose(out.terminal_a[0] - np.diag(np.diag(out.terminal_a[0])), 0.0)

    def test_stored_diagonal_nondecreasing(self):
        out = simulate(atlas3(), SimConfig(horizon=1.0, dt=1e-3, thin_stride=10))
        diag = out.a[0][:, np.arange(3), np.arange(3)]
        assert np.all(np.diff(diag, axis=0) >= 0)

    def test_name_correlation_kernel_matches_reference(self):
        rng = np.random.default_rng(0)
        rho = rng.normal(0.0, 0.1, (3, 3))
        p = atlas3(gamma_name=(0.1, 0.0, -0.1), sigma=(1.0, 1.1, 1.2), rho=rho)
        steps = 20
        cfg = SimConfig(horizon=steps * 1e-3, dt=1e-3, seed=9)
        out = simulate(p, cfg)

        y = p.y0.copy()
        a = np.zeros((3, 3))
        noise = np.concatenate(list(noise_blocks(cfg.seed, 0, steps, 3)))
        sqdt = math.sqrt(cfg.dt)
        for s in range(steps):
            order = np.lexsort((np.arange(3), -y))
            rank_of = np.empty(3, dtype=int)
            rank_of[order] = np.arange(3)
            smat = np.diag(p.sigma_rank[rank_of]) + rho
            a += smat @ smat.T * cfg.dt
            drift = p.g_rank[rank_of] + p.gamma_name + p.gamma
            y = y + drift * cfg.dt + smat @ noise[s] * sqdt
        assert np.allclose(out.terminal_y[0], y, atol=1e-12)
        assert np.allclose(out.terminal_a[0], a, atol=1e-12)


class TestGrowthRates:
    def test_all_rates_approach_common_drift(self):
        p = atlas3(gamma=0.05)
        cfg = SimConfig(horizon=2000.0, dt=1e-3, paths=8, seed=4,
                        store_paths=False)
        rates = growth_rates(simulate(p, cfg))
        tol = 3 / math.sqrt(2000.0 * 8)
        assert np.abs(rates.name_rates.mean(axis=0) - 0.05).max() < tol
        assert abs(rates.market_rate.mean() - 0.05) < tol
        assert np.abs(rates.rank_rates.mean(axis=0) - 0.05).max() < tol

    def test_coherence_names_track_market(self):
        p = atlas3(gamma=0.05)
        cfg = SimConfig(horizon=2000.0, dt=1e-3, paths=4, seed=6,
                        store_paths=False)
        rates = growth_rates(simulate(p, cfg))
        spread = np.abs(rates.name_rates - rates.market_rate[:, None]).max()
        assert spread < 0.05

    def test_json_summary_fields(self):
        out = simulate(atlas3(), SimConfig(horizon=1.0, dt=1e-3, paths=2,
                                           store_paths=False))
        d = growth_rates(out).to_json_dict()
        assert d["paths"] == 2
        assert len(d["name_rates_mean"]) == 3
        assert d["market_rate_stderr"] >= 0


class TestGapTrajectory:
    def test_nonnegative_everywhere(self):
        out = simulate(atlas3(gamma_name=(0.2, 0.0, -0.2)),
                       SimConfig(horizon=10.0, dt=1e-3, thin_stride=10))
        times, xi = gap_trajectory(out)
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(10.0)
        assert xi.shape == (1001, 2)
        assert xi.min() >= 0

    def test_requires_stored_paths(self):
        out = simulate(atlas3(), SimConfig(horizon=1.0, dt=1e-3,
                                           store_paths=False))
        with pytest.raises(UnavailableError):
            gap_trajectory(out)

    def test_stationary_gap_mean(self):
        out = simulate(atlas3(), SimConfig(horizon=10_000.0, dt=1e-3, seed=11,
                                           thin_stride=100))
        _, xi = gap_trajectory(out)
        assert abs(xi[:, 0].mean() - 0.5) < 0.05
        assert abs(xi[:, 1].mean() - 0.25) < 0.05


class TestCollisionStats:
    def test_extreme_eps(self):
        out = simulate(atlas3(), SimConfig(horizon=5.0, dt=1e-3))
        assert collision_stats(out, 1e9) == (1.0, 1.0)
        assert collision_stats(out, 0.0) == (0.0, 0.0)

    def test_triple_ties_rarer_and_decaying_faster(self):
        out = simulate(atlas3(), SimConfig(horizon=100.0, dt=1e-3, seed=8))
        ratios = []
        for eps in (0.1, 0.05, 0.025):
            pair, triple = collision_stats(out, eps)
            assert triple < pair
            ratios.append(triple / pair)
        assert ratios[0] > ratios[-1]


class TestNameVarianceTemplate:
    def test_occupation_matches_alpha_template(self):
        # one heavy name: extra variance pushes it to the edge ranks
        rho = np.zeros((3, 3))
        rho[2, 2] = 5.0
        p = ModelParams(n=3, gamma=0.0, gamma_name=np.zeros(3),
                        g_rank=np.array([-1.0, 0.0, 1.0]),
                        sigma_rank=np.ones(3), rho=rho)
        out = simulate(p, SimConfig(horizon=1e5, dt=1e-3, seed=12,
                                    store_paths=False))
        theta = occupation_estimate(out).theta
        alpha = theta[0, 2]
        assert 1 / 3 < alpha < 1 / 2
        template = np.array([
            [(1 - alpha) / 2, (1 - alpha) / 2, alpha],
            [alpha, alpha, 1 - 2 * alpha],
            [(1 - alpha) / 2, (1 - alpha) / 2, alpha],
        ])
        assert np.abs(theta - template).max() < 0.02
