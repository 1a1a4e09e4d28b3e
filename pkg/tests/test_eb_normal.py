import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvcp._normal import norm_isf
from rvcp.eb_normal import (
    EBModel,
    TAU2_FLOOR,
    build_threshold_table,
    conjugate_variance,
    fit_eb,
    marginal_selection,
    posterior,
    solve_z_beta,
    theta_quantile,
    threshold,
    threshold_std,
)
from rvcp.errors import AllZeroVariance, DegenerateG, DomainError

Z95 = 1.6448536269514722  # upper 5% point of N(0, 1)


def std_model(support):
    return EBModel(0.0, 1.0, np.asarray(support, dtype=float))


class TestFit:
    def test_two_point_without_variance(self):
        m = fit_eb(([-1.0, 1.0], [0.0, 0.0]), allow_zero_variance=True)
        assert m.mu == 0.0
        assert m.tau2 == 2.0
        assert m.degenerate

    def test_all_zero_variance_raises_by_default(self):
        with pytest.raises(AllZeroVariance):
            fit_eb(([-1.0, 1.0], [0.0, 0.0]))

    def test_negative_moment_is_floored(self):
        m = fit_eb(([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]))
        assert m.tau2 == TAU2_FLOOR
        assert m.fit_diagnostics["tau2_floor_active"]
        assert m.fit_diagnostics["raw_tau2"] == -1.0

    def test_monte_carlo_consistency(self):
        rng = np.random.default_rng(2024)
        theta = rng.normal(0.0, 1.0, 10_000)
        obs = theta + rng.normal(0.0, math.sqrt(0.5), 10_000)
        m = fit_eb((obs, np.full(10_000, 0.5)))
        assert abs(m.mu) <= 0.05
        assert abs(m.tau2 - 1.0) <= 0.1

    def test_needs_two_candidates(self):
        with pytest.raises(DomainError):
            fit_eb(([1.0], [1.0]))

    def test_support_compression_keeps_quantiles(self):
        v = np.linspace(0.0, 10.0, 10_001)
        m = fit_eb((np.random.default_rng(0).normal(size=v.size), v), max_support=100)
        assert m.g_support.size == 100
        assert m.fit_diagnostics["support_compressed"]
        assert abs(m.g_support.mean() - v.mean()) < 0.01


class TestPosterior:
    def test_zero_variance_returns_observation(self):
        assert posterior(1.7, 0.0, EBModel(0.3, 2.0, np.array([1.0]))) == (1.7, 0.0)

    def test_equal_precision(self):
        assert posterior(2.0, 1.0, std_model([1.0])) == (1.0, 0.5)

    def test_general_case(self):
        mean, var = posterior(3.0, 4.0, EBModel(1.0, 2.0, np.array([1.0])))
        assert mean == pytest.approx(10 / 6, abs=1e-12)
        assert var == pytest.approx(8 / 6, abs=1e-12)

    @given(
        st.floats(-100, 100),
        st.floats(1e-6, 100),
        st.floats(-100, 100),
        st.floats(1e-3, 100),
    )
    def test_shrinks_strictly_between(self, obs, s, mu, tau2):
        if abs(obs - mu) < 1e-6:
            return
        mean, _ = posterior(obs, s, EBModel(mu, tau2, np.array([1.0])))
        lo, hi = sorted((mu, obs))
        assert lo < mean < hi


class TestThetaQuantile:
    def test_median(self):
        assert theta_quantile(0.5, std_model([1.0])) == 0.0

    def test_upper_five_percent(self):
        assert theta_quantile(0.05, std_model([1.0])) == pytest.approx(Z95, abs=1e-12)

    def test_affine(self):
        m = EBModel(2.0, 9.0, np.array([1.0]))
        assert theta_quantile(0.05, m) == pytest.approx(2 + 3 * Z95, abs=1e-12)
        assert theta_quantile(0.05, m) == pytest.approx(6.9346, abs=1e-4)

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, beta):
        with pytest.raises(DomainError):
            theta_quantile(beta, std_model([1.0]))


class TestSolveZ:
    def test_point_mass_closed_form(self):
        z = solve_z_beta(0.05, std_model([1.0]))
        assert z == pytest.approx(Z95 * (math.sqrt(2) - 1), abs=1e-9)
        assert z == pytest.approx(0.6813, abs=1e-4)

    @pytest.mark.parametrize("s", [0.01, 0.3, 1.0, 5.0, 80.0])
    @pytest.mark.parametrize("beta", [0.01, 0.2, 0.45])
    def test_point_mass_family(self, s, beta):
        theta = float(norm_isf(beta))
        expected = theta * (math.sqrt(s + 1) - 1) / math.sqrt(s)
        assert solve_z_beta(beta, std_model([s])) == pytest.approx(expected, abs=1e-9)

    def test_median_gives_zero(self):
        assert abs(solve_z_beta(0.5, std_model([1.0]))) <= 1e-10

    def test_degenerate_g(self):
        with pytest.raises(DegenerateG):
            solve_z_beta(0.1, std_model([0.0, 0.0]))

    def test_monte_carlo_oracle(self):
        # simulate the selection rule x >= t(s) directly, independent of F
        model = std_model([0.5, 2.0])
        beta = 0.1
        z = solve_z_beta(beta, model)
        rng = np.random.default_rng(7)
        n = 10**6
        theta = rng.standard_normal(n)
        s = rng.choice([0.5, 2.0], size=n)
        x = theta + np.sqrt(s) * rng.standard_normal(n)
        t = threshold_std(float(theta_quantile(beta, model)), z, s)
        assert abs(np.mean(x >= t) - beta) <= 2e-3

    def test_residual(self):
        model = std_model([0.5, 2.0])
        grid = np.arange(1, 1000) / 1000
        z = solve_z_beta(grid, model)
        assert np.max(np.abs(marginal_selection(z, grid, model) - grid)) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.floats(0.0, 50.0), min_size=1, max_size=8).filter(lambda v: max(v) > 1e-3),
        st.floats(0.01, 0.99),
    )
    def test_duplication_invariance(self, support, beta):
        a = solve_z_beta(beta, std_model(support))
        b = solve_z_beta(beta, std_model(support * 2))
        assert abs(a - b) <= 1e-8

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.floats(1e-3, 50.0), min_size=1, max_size=6),
        st.floats(0.001, 0.999),
        st.floats(-5, 5),
        st.floats(0.01, 20),
    )
    def test_constraint_met_on_any_scale(self, support, beta, mu, tau2):
        model = EBModel(mu, tau2, np.asarray(support))
        z = solve_z_beta(beta, model)
        assert abs(marginal_selection(z, beta, model) - beta) <= 1e-10


class TestThreshold:
    def test_zero_variance_is_theta(self):
        m = EBModel(1.5, 4.0, np.array([1.0]))
        assert threshold(0.05, 0.0, m) == pytest.approx(theta_quantile(0.05, m), abs=1e-15)

    def test_direct_evaluation(self):
        assert threshold(0.05, 1.0, std_model([1.0]), z_beta=0.6813) == pytest.approx(
            2 * Z95 - 0.6813 * math.sqrt(2), abs=1e-12
        )
        assert threshold(0.05, 1.0, std_model([1.0]), z_beta=0.6813) == pytest.approx(2.3262, abs=1e-4)

    def test_returns_to_theta_at_s0(self):
        m = std_model([1.0])
        z = solve_z_beta(0.05, m)
        theta = theta_quantile(0.05, m)
        s0 = z * z / (theta * theta - z * z)
        assert abs(threshold(0.05, s0, m, z) - theta) <= 1e-9

    def test_original_scale_matches_standardized(self):
        m = EBModel(-2.0, 9.0, np.array([0.5, 3.0]))
        z = solve_z_beta(0.2, m)
        theta_std = float((theta_quantile(0.2, m) - m.mu) / m.tau)
        sigma2 = np.array([0.0, 1.0, 7.5])
        direct = threshold(0.2, sigma2, m, z)
        via_std = m.mu + m.tau * threshold_std(theta_std, z, sigma2 / m.tau2)
        assert np.allclose(direct, via_std, rtol=0, atol=1e-12)

    def test_negative_variance_rejected(self):
        with pytest.raises(DomainError):
            threshold(0.1, -1.0, std_model([1.0]))


@pytest.fixture(scope="module")
def table():
    return build_threshold_table(std_model([1.0]), 999)


class TestTable:
    def test_midpoint_theta_is_zero(self, table):
        assert table.alpha_grid[499] == 0.5
        assert table.theta_beta[499] == 0.0

    def test_theta_strictly_decreasing(self, table):
        assert np.all(np.diff(table.theta_beta) < 0)

    def test_residuals(self, table):
        assert np.max(np.abs(table.residuals())) <= 1e-8

    def test_z_below_theta_in_upper_region(self, table):
        upper = table.theta_std > 0
        assert np.all(table.z_beta[upper] < table.theta_std[upper])

    def test_z_at_off_grid_solves(self, table):
        assert table.z_at(0.05) == table.z_beta[49]
        assert table.z_at(0.0505) == pytest.approx(solve_z_beta(0.0505, table.model), abs=1e-12)

    def test_grid_size_validated(self):
        with pytest.raises(DomainError):
            build_threshold_table(std_model([1.0]), 1)

    def test_degenerate_g_propagates(self):
        with pytest.raises(DegenerateG):
            build_threshold_table(std_model([0.0]), 9)


class TestConjugateVariance:
    def test_nonpositive_z(self):
        assert conjugate_variance(1.0, 0.0) == (0.0, 0.0)
        assert conjugate_variance(1.0, -0.4) == (0.0, 0.0)

    def test_formula_values(self):
        s_star, s_conj = conjugate_variance(1.6449, 0.6813)
        assert s_conj == pytest.approx(0.6813**2 / (1.6449**2 - 0.6813**2), rel=1e-14)
        assert s_conj == pytest.approx(0.20708, abs=1e-5)
        assert s_star == pytest.approx(0.0493, abs=1e-4)
        assert s_conj > s_star

    def test_s_star_is_grid_minimum(self):
        s_star, _ = conjugate_variance(1.6449, 0.6813)
        grid = np.arange(0, 10_001) * 1e-4
        t = threshold_std(1.6449, 0.6813, grid)
        assert abs(grid[np.argmin(t)] - s_star) <= 1e-4

    def test_z_above_theta_rejected(self):
        with pytest.raises(DomainError):
            conjugate_variance(1.0, 1.5)

    @given(st.floats(0.05, 5.0), st.floats(0.01, 0.99))
    def test_shape_of_threshold(self, theta, frac):
        z = theta * frac
        s_star, s_conj = conjugate_variance(theta, z)
        assert threshold_std(theta, z, s_star) < theta
        assert threshold_std(theta, z, s_conj) == pytest.approx(theta, abs=1e-9 * max(1, s_conj))
