"""Distances, closed-form marginals, moment flows, joint endpoint/min draws."""

import math

import numpy as np
import pytest
from scipy import stats as sps

from gwiforest.errors import ConfigError
from gwiforest.stats import (
    chi_square_gof,
    expected_running_min,
    gridded_cdf,
    height_marginal,
    hill_tail_index,
    ks_distance,
    ks_distance_cdf,
    mean_trajectory,
    normal_marginal,
    running_min_marginal,
    sample_endpoint_and_min,
    stable_positive_marginal,
)

# frozen oracle values (hand formulas, evaluated independently)
DAMPED_MEAN_V1 = 0.7424843911799903      # x e^{-v} + (1 - e^{-v}), x=0.3
COUPLED_MEAN_V1 = 1.2974425414002564     # 2 (e^{1/2} - 1)
MIN_CROSSING = 0.4619205837877738        # P(min <= -1/2), drift 1/2, unit var
STABLE_C = 1.1816359006036772            # tail 0.5 k^{-2.5}: c = A G(2-a)/(a(a-1))


class TestDistances:
    def test_two_sample_hand_case(self):
        assert ks_distance([0.1, 0.4], [0.25]) == pytest.approx(0.5)

    def test_one_sample_hand_case(self):
        got = ks_distance_cdf([0.5], lambda x: np.asarray(x))
        assert got == pytest.approx(0.5)

    def test_one_sample_matches_scipy(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0.2, 1.3, 500)
        mine = ks_distance_cdf(x, sps.norm(0.2, 1.3).cdf)
        ref = sps.kstest(x, sps.norm(0.2, 1.3).cdf).statistic
        assert mine == pytest.approx(ref, abs=1e-12)

    def test_same_law_small_distance(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=10_000), rng.normal(size=10_000)
        assert ks_distance(a, b) < 0.03


class TestChiSquare:
    def test_exact_fit_gives_p_one(self):
        probs = [0.25, 0.5, 0.25]
        stat, pval, _ = chi_square_gof([250, 500, 250], probs)
        assert stat == pytest.approx(0.0, abs=1e-12)
        assert pval == pytest.approx(1.0)

    def test_sampled_poisson_fits(self):
        rng = np.random.default_rng(8)
        x = rng.poisson(0.9, 100_000)
        counts = np.bincount(x)
        pmf = sps.poisson(0.9).pmf(np.arange(counts.size))
        _, pval, _ = chi_square_gof(counts, pmf)
        assert pval > 0.001

    def test_wrong_law_rejected(self):
        rng = np.random.default_rng(9)
        x = rng.poisson(1.2, 100_000)
        counts = np.bincount(x)
        pmf = sps.poisson(0.9).pmf(np.arange(counts.size))
        _, pval, _ = chi_square_gof(counts, pmf)
        assert pval < 1e-6

    def test_tail_pooling_keeps_cells_heavy(self):
        # most cells would have tiny expectation without pooling
        counts = np.zeros(60, dtype=int)
        counts[:3] = [40, 35, 25]
        pmf = sps.poisson(0.8).pmf(np.arange(60))
        _, _, ncells = chi_square_gof(counts, pmf)
        assert ncells <= 5


class TestClosedFormMarginals:
    def test_height_and_min_means_are_consistent(self):
        beta, t = 0.5, 1.0
        assert running_min_marginal(beta, t).mean() == pytest.approx(
            expected_running_min(beta, t), abs=1e-12
        )
        # height is the reflected path divided by beta
        assert height_marginal(beta, t).mean() == pytest.approx(
            expected_running_min(beta, t) / beta, abs=1e-12
        )

    def test_reflection_mean_value(self):
        # sqrt(2 beta) sqrt(2 t / pi) at beta=1/2, t=1
        assert expected_running_min(0.5, 1.0) == pytest.approx(
            math.sqrt(2.0 / math.pi), abs=1e-12
        )

    def test_normal_marginal_is_gaussian(self):
        d = normal_marginal(0.3, 2.0)
        assert d.mean() == pytest.approx(0.3)
        assert d.var() == pytest.approx(2.0)

    def test_domain_errors(self):
        for bad in (lambda: height_marginal(0.0, 1.0), lambda: normal_marginal(0, 0)):
            with pytest.raises(ConfigError):
                bad()


class TestStableMarginal:
    def test_laplace_transform_by_monte_carlo(self):
        # E exp(-u X) must equal exp(c u^alpha); a wrong skew or scale
        # mapping is off by orders of magnitude here
        dist = stable_positive_marginal(1.5, STABLE_C, t=1.0)
        x = dist.rvs(size=1_000_000, random_state=np.random.default_rng(21))
        for u, want in ((0.5, math.exp(STABLE_C * 0.5 ** 1.5)), (1.0, math.exp(STABLE_C))):
            got = float(np.mean(np.exp(-u * x)))
            assert got == pytest.approx(want, rel=0.02)

    def test_zero_mean(self):
        dist = stable_positive_marginal(1.5, STABLE_C)
        x = dist.rvs(size=400_000, random_state=np.random.default_rng(22))
        # alpha > 1 so the mean exists; trim nothing, the tail is p=2.5 integrable
        assert abs(float(np.mean(x))) < 0.05

    def test_gridded_cdf_matches_direct(self):
        d = sps.norm(0.5, 2.0)
        cdf = gridded_cdf(d, -15.0, 16.0, 4001)
        pts = np.linspace(-6, 7, 37)
        assert np.max(np.abs(cdf(pts) - d.cdf(pts))) < 1e-5


class TestHill:
    def test_pareto_index_recovered(self):
        rng = np.random.default_rng(31)
        alpha = 1.5
        x = rng.random(100_000) ** (-1.0 / alpha)
        est = hill_tail_index(x, 1000)
        assert est == pytest.approx(alpha, rel=0.15)

    def test_needs_enough_points(self):
        with pytest.raises(ConfigError):
            hill_tail_index([1.0, 2.0], 5)


class TestMeanTrajectory:
    def test_pure_immigration_is_linear(self):
        got = mean_trajectory([[0.0]], [1.0], [0.0], 1.0)
        assert got[0] == pytest.approx(1.0, abs=1e-12)

    def test_damped_closed_form(self):
        got = mean_trajectory([[-1.0]], [1.0], [0.3], 1.0)
        assert got[0] == pytest.approx(DAMPED_MEAN_V1, abs=1e-10)

    def test_symmetric_coupling_closed_form(self):
        alpha = [[0.0, 0.5], [0.5, 0.0]]
        got = mean_trajectory(alpha, [1.0, 1.0], [0.0, 0.0], 1.0)
        assert got[0] == pytest.approx(COUPLED_MEAN_V1, abs=1e-10)
        assert got[1] == pytest.approx(COUPLED_MEAN_V1, abs=1e-10)

    def test_vector_of_times(self):
        out = mean_trajectory([[0.0]], [2.0], [0.5], np.array([0.0, 0.5, 1.0]))
        assert out.shape == (3, 1)
        assert np.allclose(out[:, 0], [0.5, 1.5, 2.5], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            mean_trajectory([[0.0]], [1.0, 2.0], [0.0], 1.0)


class TestEndpointAndMin:
    def test_min_never_exceeds_endpoint_or_zero(self):
        rng = np.random.default_rng(41)
        y, m = sample_endpoint_and_min(rng, 1.0, 0.7, 1.0, 50_000)
        assert np.all(m <= np.minimum(y, 0.0) + 1e-12)

    def test_driftless_marginals(self):
        rng = np.random.default_rng(42)
        beta = 0.5
        y, m = sample_endpoint_and_min(rng, 2.0 * beta, 0.0, 1.0, 20_000)
        assert ks_distance_cdf(y, sps.norm(0, 1).cdf) < 0.02
        assert ks_distance_cdf(-m, running_min_marginal(beta, 1.0).cdf) < 0.02
        # Levy: endpoint minus running min is distributed as a reflected path
        assert ks_distance_cdf(y - m, running_min_marginal(beta, 1.0).cdf) < 0.02

    def test_drifted_min_crossing_probability(self):
        rng = np.random.default_rng(43)
        _, m = sample_endpoint_and_min(rng, 1.0, 0.5, 1.0, 100_000)
        frac = float(np.mean(m <= -0.5))
        se = math.sqrt(MIN_CROSSING * (1 - MIN_CROSSING) / 100_000)
        assert frac == pytest.approx(MIN_CROSSING, abs=4 * se)

    def test_domain_errors(self):
        with pytest.raises(ConfigError):
            sample_endpoint_and_min(np.random.default_rng(0), 0.0, 0.0, 1.0, 10)
