import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcert.bounds import (DomainError, TrainingRecipe, bernstein_F, gaussian_mechanism_objective,
                           gaussian_sigma_for_dp, lambda_domain, maxinfo_dpsgd_explicit,
                           maxinfo_dpsgd_optimized, maxinfo_gaussian_mechanism, maxinfo_pure_dp,
                           minimize_log_grid, noise_ratio, ratio_R, ratio_slope_numerator,
                           tau_closed_form, tau_tight, tau_u_bound, tau_u_minimizer, tau_u_objective)

betas = st.floats(1e-8, 0.9)
nus = st.floats(1e-8, 1e3)
steps = st.integers(1, 500)


def recipe(E=1, T=12, m=5000, zeta=0.01, sigma=1.0):
    return TrainingRecipe(E, T, m, zeta, sigma)


def test_noise_ratio_edges():
    assert noise_ratio(10, 0.1, 1.0) == pytest.approx(0.1)
    assert noise_ratio(10, 0.0, 0.0) == 0.0
    assert math.isinf(noise_ratio(10, 0.1, 0.0))
    assert math.isinf(noise_ratio(10, math.inf, 1.0))


def test_lambda_domain_matches_direct_formula():
    for nu in (1e-6, 0.01, 1.0, 50.0):
        assert lambda_domain(nu) == pytest.approx(math.sqrt(1 / nu + 0.25) - 0.5, rel=1e-12)
    # stable for large nu, where the direct formula cancels
    assert lambda_domain(1e12) == pytest.approx(1e-12, rel=1e-9)


def test_bernstein_F_domain():
    assert bernstein_F(0.0, 1.0) == 0.0
    assert bernstein_F(0.1, 0.0) == 0.0
    assert bernstein_F(0.1, 1.0) == pytest.approx((16 * 0.01 + 0.1) / 0.8)
    with pytest.raises(DomainError):
        bernstein_F(0.5, 1.0)


def test_explicit_hand_value():
    # q = 1 when log(E / beta) = T / 2: kappa = (1 + 3 + 1/2) + (1/2 + 3 + 1/2)
    r = TrainingRecipe(1, 1, 1, 1.0, 1.0)
    assert maxinfo_dpsgd_explicit(r, math.exp(-0.5)).value == pytest.approx(8.5, rel=1e-12)
    assert tau_closed_form(1, 1.0, math.exp(-0.5)) == pytest.approx(8.0, rel=1e-12)


def test_reference_recipe_values():
    k_opt = maxinfo_dpsgd_optimized(recipe(), 0.025)
    k_exp = maxinfo_dpsgd_explicit(recipe(), 0.025)
    assert k_opt.value == pytest.approx(27.5566, abs=1e-3)
    assert k_exp.value == pytest.approx(48.7693, abs=1e-3)
    assert 0 < k_opt.minimizer < lambda_domain(recipe().nu)


def test_zero_clip_gives_zero_kappa():
    r = TrainingRecipe(3, 5, 10, 0.0, 1.0)
    assert maxinfo_dpsgd_optimized(r, 0.05).value == 0.0
    assert maxinfo_dpsgd_explicit(r, 0.05).value == 0.0


@pytest.mark.parametrize("bad", [dict(zeta=math.inf), dict(sigma=0.0)])
def test_infinite_nu_rejected(bad):
    with pytest.raises(ValueError):
        maxinfo_dpsgd_optimized(recipe(**bad), 0.05)


@pytest.mark.parametrize("beta", [0.0, 1.0, 1.5, -0.1])
def test_beta_validated(beta):
    with pytest.raises(ValueError):
        maxinfo_dpsgd_optimized(recipe(), beta)


def test_recipe_validation():
    with pytest.raises(ValueError):
        TrainingRecipe(0, 1, 1, 0.1, 1.0)
    with pytest.raises(ValueError):
        TrainingRecipe(1, 10, 10, 0.1, 1.0, dataset_size=99)
    with pytest.raises(ValueError):
        TrainingRecipe(1, 1, 1, -0.1, 1.0)


def test_minimize_log_grid_known_function():
    x, f = minimize_log_grid(lambda x: x + 1.0 / x, 1e-3, 1e3)
    assert x == pytest.approx(1.0, rel=1e-6)
    assert f == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(DomainError):
        minimize_log_grid(lambda x: np.full_like(x, np.inf), 1.0, 2.0)


def test_gaussian_mechanism_against_dense_grid():
    # independent oracle: the objective written out and scanned on 10^6 points
    m, s, sigma, beta = 2, 1.0, 5.0, 0.05
    alpha = np.logspace(-8, 6, 1_000_000)
    A, B = m * s * s / sigma**2, math.sqrt(m) * s / sigma
    q2 = np.log((1 + alpha / 2) / beta)
    q = np.sqrt(q2)
    grid_min = np.min(A * (0.75 + q / 2 + q2 / 4) + B * (1 + q) * np.sqrt(q2 - np.log(alpha)))
    got = maxinfo_gaussian_mechanism(m, s, sigma, beta)
    assert got.value == pytest.approx(1.6293703428, abs=1e-9)
    assert got.value <= grid_min + 1e-12
    assert grid_min - got.value < 1e-9
    assert gaussian_mechanism_objective(got.minimizer, m, s, sigma, beta) == pytest.approx(got.value)


def test_gaussian_mechanism_infeasible_alpha_for_large_beta():
    # for beta > 1/2 the square root is negative beyond alpha = 1/(beta - 1/2)
    v = gaussian_mechanism_objective(np.array([1.0, 10.0]), 1, 1.0, 1.0, 0.9)
    assert math.isfinite(v[0]) and math.isinf(v[1])
    assert math.isfinite(maxinfo_gaussian_mechanism(1, 1.0, 1.0, 0.9).value)


def test_u_objective_minimizer_against_grid():
    for L in (0.01, 0.3, 2.0, 10.0):
        u = np.linspace(1e-5, 1 - 1e-5, 100_000)
        G = tau_u_objective(u, L)
        u_star = tau_u_minimizer(L)
        assert u_star == pytest.approx(u[np.argmin(G)], abs=2e-5)
        assert float(tau_u_objective(u_star, L)) == pytest.approx(0.5 + 3 * math.sqrt(2 * L) + L, rel=1e-12)
        assert float(tau_u_objective(u_star, L)) <= G.min() + 1e-12


@settings(max_examples=200, deadline=None)
@given(steps, nus, betas)
def test_tau_chain_of_bounds(T, nu, beta):
    tight, _ = tau_tight(T, nu, beta)
    assert tight <= tau_u_bound(T, nu, beta) * (1 + 1e-9)
    assert tau_u_bound(T, nu, beta) <= tau_closed_form(T, nu, beta) * (1 + 1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 20), steps, st.integers(1, 10_000), st.floats(1e-4, 1.0), st.floats(0.1, 30.0), betas)
def test_optimized_dominates_explicit(E, T, m, zeta, sigma, beta):
    r = TrainingRecipe(E, T, m, zeta, sigma)
    assert maxinfo_dpsgd_optimized(r, beta).value <= maxinfo_dpsgd_explicit(r, beta).value


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.floats(1e-4, 0.1), st.floats(0.1, 10.0), st.floats(1e-6, 0.5))
def test_optimized_monotone(T, zeta, sigma, beta):
    base = maxinfo_dpsgd_optimized(TrainingRecipe(1, T, 100, zeta, sigma), beta).value
    assert maxinfo_dpsgd_optimized(TrainingRecipe(1, T, 100, zeta * 1.5, sigma), beta).value > base
    assert maxinfo_dpsgd_optimized(TrainingRecipe(1, T, 100, zeta, sigma * 1.5), beta).value < base
    assert maxinfo_dpsgd_optimized(TrainingRecipe(1, T + 1, 100, zeta, sigma), beta).value > base
    assert maxinfo_dpsgd_optimized(TrainingRecipe(1, T, 100, zeta, sigma), beta / 2).value > base


def test_pure_dp_and_calibration():
    assert maxinfo_pure_dp(100, 0.0, 0.05).value == 0.0
    v = maxinfo_pure_dp(100, 0.1, 0.05).value
    assert v == pytest.approx(0.5 + 0.1 * math.sqrt(50 * math.log(40)))
    assert gaussian_sigma_for_dp(1.0, 0.5, 1e-5) == pytest.approx(2 * math.sqrt(2 * math.log(1.25e5)))
    with pytest.raises(ValueError):
        gaussian_sigma_for_dp(1.0, 1.5, 1e-5)


def test_ratio_R_converges_towards_quarter_slowly():
    vals = [ratio_R(1e-9, b) for b in (1e-3, 1e-12, 1e-100, 1e-300)]
    assert all(v > 0.25 for v in vals)
    assert all(np.diff(vals) < 0)
    assert vals[-1] == pytest.approx(0.27, abs=0.005)


def test_ratio_slope_numerator_is_the_derivative():
    # d/db of R written in a = log(1 + alpha/2), b = log(1/beta)
    def R(a, b):
        return (0.75 + 0.5 * math.sqrt(a + b) + 0.25 * (a + b)) / (math.log(1.25) + b)

    for a, b in [(0.0, math.log(2)), (0.3, 1.0), (math.log(2.5), 5.0)]:
        h = 1e-6
        deriv = (R(a, b + h) - R(a, b - h)) / (2 * h)
        expected = ratio_slope_numerator(a, b) / (4 * (math.log(1.25) + b) ** 2)
        assert deriv == pytest.approx(expected, rel=1e-6)
        assert ratio_slope_numerator(a, b) < 0
