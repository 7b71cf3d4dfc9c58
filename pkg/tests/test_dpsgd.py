import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpcert.bounds import TrainingRecipe
from dpcert.dpsgd import (TrainingDivergedError, UpdateRule, clip, clip_rows, create_batches,
                          dpsgd_batch, dpsgd_stream, replay, train)
from dpcert.models import BoundedLoss, ModelSpec, init_params, per_sample_gradients, synth_dataset

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=finite), st.floats(1e-6, 1e3))
def test_clip_properties(g, zeta):
    c = clip(g, zeta)
    norm = np.linalg.norm(g)
    assert np.linalg.norm(c) <= zeta
    if norm <= zeta:
        assert np.array_equal(c, g)
    elif norm > 0:
        # same direction, norm at the threshold up to rounding
        assert np.linalg.norm(c) == pytest.approx(zeta, rel=1e-12)
        assert np.allclose(c * norm, g * np.linalg.norm(c), rtol=1e-9, atol=1e-300)


def test_clip_edges():
    g = np.array([3.0, 4.0])
    assert np.array_equal(clip(g, 0.0), np.zeros(2))
    assert np.array_equal(clip(g, math.inf), g)
    assert np.array_equal(clip(np.zeros(2), 1.0), np.zeros(2))
    with pytest.raises(ValueError):
        clip(np.array([np.nan, 1.0]), 1.0)
    with pytest.raises(ValueError):
        clip(g, -1.0)
    assert np.all(np.linalg.norm(clip_rows(np.ones((4, 3)) * 7, 0.3), axis=1) <= 0.3)


def test_create_batches():
    plan = create_batches(100, 7, 13, seed=3)
    assert plan.index_sets.shape == (13, 7) and plan.is_valid(100)
    assert np.array_equal(plan.index_sets, create_batches(100, 7, 13, seed=3).index_sets)
    with pytest.raises(ValueError):
        create_batches(10, 4, 3, seed=0)


def _setup(n=120, arch="linear_softmax"):
    data = synth_dataset("two_gaussians", n, 2, seed=0)
    spec = ModelSpec(arch, 2, 2, hidden=(4,))
    loss = BoundedLoss()

    def grad(theta, batch):
        return per_sample_gradients(spec, theta, batch.features, batch.labels, loss)[1]

    return data, spec, grad, init_params(spec, 0)


def test_zero_clip_is_pure_noise_walk():
    data, spec, grad, theta0 = _setup()
    recipe = TrainingRecipe(2, 3, 10, 0.0, 0.7, len(data))
    tr = train(data, recipe, UpdateRule("plain", 0.1), grad, 5, theta0)
    assert np.array_equal(tr.updates, 0.7 * tr.noises)
    assert np.allclose(tr.final, theta0 - 0.1 * 0.7 * tr.noises.sum(axis=0))


def test_no_noise_no_clip_is_plain_minibatch_sgd():
    data, spec, grad, theta0 = _setup()
    recipe = TrainingRecipe(1, 3, 10, math.inf, 0.0, len(data))
    tr = train(data, recipe, UpdateRule("plain", 0.05), grad, 5, theta0)
    theta = theta0.copy()
    for I in tr.plans[0].index_sets:
        theta = theta - 0.05 * grad(theta, data[I]).sum(axis=0)
    assert np.allclose(tr.final, theta)


@pytest.mark.parametrize("rule", [UpdateRule("plain", 0.1),
                                  UpdateRule("momentum_wd", [0.1, 0.05, 0.02], momentum=0.8, weight_decay=0.01),
                                  UpdateRule("adam_like", 0.01)])
def test_replay_reproduces_trajectory(rule):
    data, spec, grad, theta0 = _setup(arch="mlp")
    recipe = TrainingRecipe(2, 3, 10, 0.1, 0.5, len(data))
    tr = train(data, recipe, rule, grad, 9, theta0)
    assert np.allclose(replay(theta0, tr.updates, rule, 3), tr.thetas)
    assert np.array_equal(tr.final, dpsgd_batch(data, recipe, rule, grad, 9, theta0))


def test_adam_first_step_is_normalized():
    data, spec, grad, theta0 = _setup()
    recipe = TrainingRecipe(1, 1, 10, 0.1, 0.5, len(data))
    tr = train(data, recipe, UpdateRule("adam_like", 0.01, eps=1e-12), grad, 2, theta0)
    step = theta0 - tr.thetas[0]
    assert np.allclose(np.abs(step), 0.01, rtol=1e-6)


def test_seeds_change_trace():
    data, spec, grad, theta0 = _setup()
    recipe = TrainingRecipe(1, 3, 10, 0.1, 0.5, len(data))
    a = train(data, recipe, UpdateRule(), grad, 1, theta0)
    b = train(data, recipe, UpdateRule(), grad, 2, theta0)
    assert not np.array_equal(a.updates, b.updates)


def test_noise_is_standard_normal():
    data, spec, grad, theta0 = _setup(n=4000)
    recipe = TrainingRecipe(1, 400, 10, 0.0, 1.0, len(data))
    z = train(data, recipe, UpdateRule(), grad, 3, theta0).noises.ravel()
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1.0) < 4 * math.sqrt(2 / z.size)


def test_divergence_raises():
    data, spec, grad, theta0 = _setup()
    recipe = TrainingRecipe(1, 2, 10, 1.0, 0.0, len(data))
    with pytest.raises(TrainingDivergedError):
        list(dpsgd_stream(data, recipe, UpdateRule(), lambda t, b: np.full((10, spec.dim), np.inf), 0, theta0))
    with pytest.raises(TrainingDivergedError):
        list(dpsgd_stream(data, recipe, UpdateRule("plain", 1e308), lambda t, b: np.full((10, spec.dim), 0.1),
                          0, theta0))


def test_gradient_shape_checked():
    data, spec, grad, theta0 = _setup()
    recipe = TrainingRecipe(1, 2, 10, 1.0, 1.0, len(data))
    with pytest.raises(ValueError):
        list(dpsgd_stream(data, recipe, UpdateRule(), lambda t, b: np.zeros((3, spec.dim)), 0, theta0))


def test_update_rule_validation():
    with pytest.raises(ValueError):
        UpdateRule("sgd")
    with pytest.raises(ValueError):
        UpdateRule("plain", -0.1)
    assert UpdateRule("plain", [0.1, 0.2]).rate(2) == 0.2
