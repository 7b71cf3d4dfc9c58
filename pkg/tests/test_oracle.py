import math

import numpy as np
import pytest
from scipy import stats

from dpcert.oracle import (ChainOutput, TinyInstance, exact_log_marginal_density,
                           exact_marginal_density, kappa_for, sample_f, sample_f_tail,
                           tail_probability, validate_bound)


def binary(n=2, noise=5.0, **kw):
    return TinyInstance([0, 1], [0.5, 0.5], n=n, noise=noise, **kw)


def chain(**kw):
    base = dict(mechanism="dpsgd_chain", statistic="clipped_residual", clip=1.0, steps=2,
                batch_size=2, epochs=1, learning_rate=0.5, theta0=[0.3])
    base.update(kw)
    return TinyInstance([-1, 1], [0.5, 0.5], n=4, noise=4.0, **base)


def test_singleton_domain_has_zero_f():
    inst = TinyInstance([0.7], [1.0], n=3, noise=1.0)
    f = sample_f(inst, 500, seed=0)
    assert np.allclose(f, 0.0, atol=1e-12)
    assert sample_f_tail(inst, 500, 1e-6, seed=0).probability == 0.0


def test_two_point_mixture_density():
    a, sigma = 0.8, 1.3
    inst = TinyInstance([-a, a], [0.5, 0.5], n=1, noise=sigma)
    for y in (-2.0, 0.0, 0.4, 3.0):
        expected = 0.5 * (stats.norm.pdf(y, a, sigma) + stats.norm.pdf(y, -a, sigma))
        assert exact_marginal_density(inst, [y]) == pytest.approx(expected, rel=1e-12)


def test_symmetric_instance_density_is_even():
    inst = TinyInstance([-1, 1], [0.5, 0.5], n=3, noise=2.0)
    for y in (0.3, 1.7, 4.0):
        assert exact_log_marginal_density(inst, [y]) == pytest.approx(exact_log_marginal_density(inst, [-y]))


def test_log_density_survives_underflow():
    inst = TinyInstance([-1, 1], [0.5, 0.5], n=2, noise=0.01)
    assert math.isfinite(exact_log_marginal_density(inst, [50.0]))


def test_chain_density_against_hand_enumeration():
    inst = chain()
    plans = np.array([[[0, 1], [2, 3]]])
    u = np.array([[0.5], [-1.2]])
    vals = inst.domain[:, 0]

    def phi(theta, x):
        g = theta - x
        return g * min(1.0, 1.0 / abs(g)) if g != 0 else 0.0

    total = 0.0
    for S in np.ndindex(2, 2, 2, 2):
        x = vals[list(S)]
        theta, dens = 0.3, 1.0 / 16
        for t, I in enumerate(plans[0]):
            mean = sum(phi(theta, x[i]) for i in I)
            dens *= stats.norm.pdf(u[t, 0], mean, 4.0)
            theta -= 0.5 * u[t, 0]
        total += dens
    assert exact_marginal_density(inst, ChainOutput(plans, u)) == pytest.approx(total, rel=1e-12)


def test_tail_edge_cases_and_monotonicity():
    f = sample_f(binary(), 20_000, seed=1)
    assert tail_probability(f, -math.inf).probability == 1.0
    tails = [tail_probability(f, k).probability for k in np.linspace(-1, 2, 25)]
    assert all(np.diff(tails) <= 0)


def test_log_mean_exp_f_nonnegative():
    rep = validate_bound(binary(), "gaussian", 0.05, 50_000, seed=2)
    assert rep.log_mean_exp_f >= -0.01


def test_pure_noise_instance_passes():
    inst = TinyInstance([0, 1], [0.5, 0.5], n=3, noise=1.0, statistic="zero")
    rep = validate_bound(inst, "gaussian", 0.05, 5000, seed=0)
    assert rep.kappa == 0.0 and rep.passed


def test_results_independent_of_workers():
    assert np.array_equal(sample_f(chain(), 30_000, 4, workers=1), sample_f(chain(), 30_000, 4, workers=3))


def test_deliberately_invalid_threshold_is_detected():
    rep = validate_bound(binary(), "gaussian", 0.05, 100_000, seed=0, threshold_scale=0.1)
    assert not rep.passed


def test_validation_errors():
    with pytest.raises(ValueError):
        TinyInstance([0, 1], [0.5, 0.5], n=21, noise=1.0)
    with pytest.raises(ValueError):
        TinyInstance([0, 1], [0.6, 0.6], n=2, noise=1.0)
    with pytest.raises(ValueError):
        kappa_for(chain(), "gaussian", 0.1)
    with pytest.raises(ValueError):
        kappa_for(binary(), "bogus", 0.1)
    with pytest.raises(ValueError):
        sample_f(binary(), 0, seed=0)


def test_chain_checks_clip_bound_at_visited_theta():
    inst = chain(statistic="identity", clip=0.5)
    with pytest.raises(ValueError):
        sample_f(inst, 100, seed=0)


def test_single_shot_sensitivity_is_bounded_difference():
    assert binary().sensitivity() == 1.0
    assert TinyInstance([-2, 1, 3], [0.2, 0.3, 0.5], n=1, noise=1.0).sensitivity() == 5.0
