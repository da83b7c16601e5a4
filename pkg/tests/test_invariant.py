import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_stable_params

from atlas_lab.errors import (
    CapacityError,
    DomainError,
    HypothesisError,
    StabilityError,
    StructuralError,
    UnavailableError,
)
from atlas_lab.model import ModelParams, atlas_g_rank, linear_sigma_sq
from atlas_lab.ranks import Permutation, enumerate_permutations
from atlas_lab.invariant import (
    OccupationMatrix,
    chamber_weights,
    chamber_weights_mcmc,
    equilibrium_residual,
    gap_density,
    lambda_vector,
    occupation_matrix,
    require_hypotheses,
    sample_stationary,
    top_chambers,
)


def atlas3(gamma_name=(0.0, 0.0, 0.0)):
    return ModelParams(n=3, gamma=0.0, gamma_name=np.array(gamma_name),
                       g_rank=atlas_g_rank(3, 1.0), sigma_rank=np.ones(3))


def occup1():
    i = np.arange(1, 11)
    return ModelParams(
        n=10, gamma=0.0, gamma_name=1 - 2 * i / 11,
        g_rank=atlas_g_rank(10, 1.0),
        sigma_rank=np.sqrt(linear_sigma_sq(10, 1.0, 1.0)),
    )


def pure_rank(n, sigma_sq=None):
    sig = np.ones(n) if sigma_sq is None else np.sqrt(sigma_sq)
    return ModelParams(n=n, gamma=0.0, gamma_name=np.zeros(n),
                       g_rank=atlas_g_rank(n, 1.0), sigma_rank=sig)


class TestLambdaVector:
    def test_atlas_has_constant_rates(self):
        p = atlas3()
        for perm in enumerate_permutations(3):
            assert np.allclose(lambda_vector(p, perm), [2.0, 4.0], atol=1e-14)

    def test_golden_top_rate(self):
        lam = lambda_vector(occup1(), Permutation.identity(10))
        assert lam[0] == pytest.approx(8 / 55, abs=1e-15)

    def test_pure_rank_rates_chamber_independent(self):
        p = pure_rank(4, sigma_sq=[1.0, 1.5, 2.0, 2.5])
        ref = lambda_vector(p, Permutation.identity(4))
        for perm in enumerate_permutations(4):
            assert np.array_equal(lambda_vector(p, perm), ref)

    def test_unstable_rates_rejected(self):
        p = ModelParams(n=3, gamma=0.0, gamma_name=np.zeros(3),
                        g_rank=np.zeros(3), sigma_rank=np.ones(3))
        with pytest.raises(StabilityError):
            lambda_vector(p, Permutation.identity(3))


class TestHypotheses:
    def test_rho_rejected(self):
        rho = np.zeros((3, 3))
        rho[2, 2] = 1.0
        p = ModelParams(n=3, gamma=0.0, gamma_name=np.zeros(3),
                        g_rank=atlas_g_rank(3, 1.0), sigma_rank=np.ones(3),
                        rho=rho)
        with pytest.raises(HypothesisError):
            require_hypotheses(p)
        with pytest.raises(HypothesisError):
            chamber_weights(p)

    def test_nonlinear_variances_rejected(self):
        p = pure_rank(3, sigma_sq=[1.0, 2.0, 5.0])
        with pytest.raises(HypothesisError):
            chamber_weights(p)

    def test_capacity_cap(self):
        with pytest.raises(CapacityError):
            chamber_weights(pure_rank(12))


class TestChamberWeights:
    def test_pure_rank_uniform(self):
        measure = chamber_weights(pure_rank(4))
        for perm in enumerate_permutations(4):
            assert measure.theta_of(perm) == pytest.approx(1 / 24, abs=1e-12)
        assert np.allclose(measure.theta, 0.25, atol=1e-12)

    def test_two_name_closed_form(self):
        p = ModelParams(n=2, gamma=0.0, gamma_name=np.array([0.3, -0.3]),
                        g_rank=np.array([-1.0, 1.0]), sigma_rank=np.ones(2))
        measure = chamber_weights(p)
        assert measure.theta_of(Permutation([1, 2])) == pytest.approx(0.65, abs=1e-12)
        assert measure.theta_of(Permutation([2, 1])) == pytest.approx(0.35, abs=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(7)
        p = random_stable_params(rng, 5)
        measure = chamber_weights(p)
        total = sum(measure.theta_of(q) for q in enumerate_permutations(5))
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_occupation_aggregates_chamber_weights(self):
        rng = np.random.default_rng(11)
        p = random_stable_params(rng, 4)
        measure = chamber_weights(p)
        for k in range(1, 5):
            for i in range(1, 5):
                total = sum(measure.theta_of(q)
                            for q in enumerate_permutations(4)
                            if q.name_at(k) == i)
                assert total == pytest.approx(measure.theta[k - 1, i - 1],
                                              abs=1e-12)

    def test_thread_count_does_not_change_bits(self):
        p = occup1()
        a = chamber_weights(p, threads=1)
        b = chamber_weights(p, threads=4)
        assert np.array_equal(a.theta, b.theta)
        assert a.log_norm == b.log_norm

    def test_gap_means_atlas(self):
        measure = chamber_weights(atlas3())
        assert np.allclose(measure.gap_means, [0.5, 0.25], atol=1e-12)

    def test_lazy_maps_match_direct_evaluation(self):
        p = atlas3(gamma_name=(0.2, 0.0, -0.2))
        measure = chamber_weights(p)
        perm = Permutation([2, 3, 1])
        lam = measure.lambda_by_perm[perm]
        assert np.array_equal(lam, lambda_vector(p, perm))
        logw = measure.log_weight_by_perm[perm]
        assert logw == pytest.approx(-np.log(lam).sum(), abs=1e-12)


class TestOccupationMatrix:
    def test_doubly_stochastic(self):
        rng = np.random.default_rng(3)
        occ = occupation_matrix(chamber_weights(random_stable_params(rng, 6)))
        assert np.allclose(occ.row_sums(), 1.0, atol=1e-9)
        assert np.allclose(occ.col_sums(), 1.0, atol=1e-9)

    def test_entries_validated(self):
        with pytest.raises(StructuralError):
            OccupationMatrix(np.array([[1.5, -0.5], [-0.5, 1.5]]))
        with pytest.raises(StructuralError):
            OccupationMatrix(np.ones((2, 3)))

    def test_csv_layout(self, tmp_path):
        occ = occupation_matrix(chamber_weights(atlas3()))
        path = tmp_path / "theta.csv"
        occ.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "rank,name_1,name_2,name_3"
        assert len(lines) == 4


class TestEquilibriumResidual:
    def test_exact_measure_balances(self):
        rng = np.random.default_rng(5)
        p = random_stable_params(rng, 5)
        occ = occupation_matrix(chamber_weights(p))
        resid = equilibrium_residual(p, occ)
        assert np.abs(resid).max() < 1e-10

    def test_wrong_theta_detected(self):
        p = atlas3()
        resid = equilibrium_residual(p, OccupationMatrix(np.eye(3)))
        assert resid[0] == pytest.approx(-1.0)

    def test_pure_rank_identically_zero(self):
        p = pure_rank(4)
        occ = occupation_matrix(chamber_weights(p))
        assert np.abs(equilibrium_residual(p, occ)).max() < 1e-14


class TestGapDensity:
    def test_atlas_closed_form(self):
        measure = chamber_weights(atlas3())
        for z in ([0.0, 0.0], [0.3, 0.1], [1.0, 2.0]):
            want = 8.0 * math.exp(-2 * z[0] - 4 * z[1])
            assert gap_density(measure, z) == pytest.approx(want, rel=1e-12)

    def test_origin_value(self):
        measure = chamber_weights(atlas3())
        assert gap_density(measure, [0.0, 0.0]) == pytest.approx(8.0, rel=1e-12)

    def test_negative_gap_rejected(self):
        measure = chamber_weights(atlas3())
        with pytest.raises(DomainError):
            gap_density(measure, [-0.1, 0.0])
        with pytest.raises(StructuralError):
            gap_density(measure, [0.1, 0.2, 0.3])

    @given(st.integers(0, 1000))
    @settings(max_examples=30)
    def test_positive_on_valid_gaps(self, seed):
        measure = chamber_weights(atlas3(gamma_name=(0.2, 0.0, -0.2)))
        rng = np.random.default_rng(seed)
        assert gap_density(measure, rng.uniform(0, 5, 2)) > 0


class TestSampling:
    def test_deterministic_for_fixed_seed(self):
        measure = chamber_weights(atlas3(gamma_name=(0.2, 0.0, -0.2)))
        p1, xi1 = sample_stationary(measure, np.random.default_rng(42))
        p2, xi2 = sample_stationary(measure, np.random.default_rng(42))
        assert p1 == p2
        assert np.array_equal(xi1, xi2)

    def test_gap_mean_matches_analytic(self):
        measure = chamber_weights(atlas3())
        rng = np.random.default_rng(0)
        draws = np.array([sample_stationary(measure, rng)[1] for _ in range(4000)])
        # Xi_1 ~ Exp(2): mean 1/2, sd 1/2
        se = 0.5 / math.sqrt(4000)
        assert abs(draws[:, 0].mean() - 0.5) < 3 * se

    def test_pure_rank_chambers_uniform(self):
        measure = chamber_weights(pure_rank(3))
        rng = np.random.default_rng(1)
        counts = {}
        total = 6000
        for _ in range(total):
            p, _ = sample_stationary(measure, rng)
            counts[p] = counts.get(p, 0) + 1
        assert len(counts) == 6
        expected = total / 6
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        assert chi2 < 20.5               # chi^2_5 at the 99.9th percentile


class TestTopChambers:
    def test_sorted_and_consistent(self):
        rng = np.random.default_rng(9)
        p = random_stable_params(rng, 5)
        measure = chamber_weights(p)
        top = top_chambers(measure, k=10)
        weights = [w for _, w in top]
        assert weights == sorted(weights, reverse=True)
        best = max(enumerate_permutations(5), key=measure.theta_of)
        assert top[0][0] == best
        assert top[0][1] == pytest.approx(measure.theta_of(best), abs=1e-14)

    def test_k_larger_than_group(self):
        measure = chamber_weights(atlas3())
        top = top_chambers(measure, k=100)
        assert len(top) == 6
        assert sum(w for _, w in top) == pytest.approx(1.0, abs=1e-10)


class TestMcmc:
    def test_pure_rank_converges_to_uniform(self):
        measure = chamber_weights_mcmc(pure_rank(4), iters=120_000, seed=0)
        assert measure.mode == "mcmc"
        assert np.abs(measure.theta - 0.25).max() < 0.02
        assert measure.theta_stderr is not None
        assert 0 < measure.acceptance_rate <= 1.0

    def test_acceptance_strictly_interior_with_distinct_gammas(self):
        rng = np.random.default_rng(13)
        p = random_stable_params(rng, 5)
        measure = chamber_weights_mcmc(p, iters=50_000, seed=3)
        assert 0 < measure.acceptance_rate < 1

    def test_deterministic_for_fixed_seed(self):
        p = atlas3(gamma_name=(0.2, 0.0, -0.2))
        a = chamber_weights_mcmc(p, iters=30_000, seed=5)
        b = chamber_weights_mcmc(p, iters=30_000, seed=5)
        assert np.array_equal(a.theta, b.theta)
        assert a.acceptance_rate == b.acceptance_rate

    def test_unstable_config_rejected(self):
        p = ModelParams(n=3, gamma=0.0, gamma_name=np.zeros(3),
                        g_rank=np.zeros(3), sigma_rank=np.ones(3))
        with pytest.raises(StabilityError):
            chamber_weights_mcmc(p, iters=1000, seed=0)

    def test_exact_only_operations_guarded(self):
        measure = chamber_weights_mcmc(pure_rank(3), iters=5_000, seed=0)
        with pytest.raises(UnavailableError):
            measure.theta_of(Permutation.identity(3))
        with pytest.raises(UnavailableError):
            gap_density(measure, [0.1, 0.1])
