import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import central_difference, gradient_case, rel_error, scripted_logits
from taskmerge.errors import DomainError
from taskmerge.losses import LossSpec, batch_loss, grad_loss
from taskmerge.model import (ModelSpec, ParamVector, flatten, forward_logits, init_params,
                             trainable_mask, unflatten)


def test_zero_theta_gives_zero_logits(rng):
    spec = ModelSpec()
    theta = ParamVector.zeros(spec)
    np.testing.assert_array_equal(forward_logits(spec, theta, rng.normal(size=16)), np.zeros(4))


def test_linear_model_reads_first_weight_column():
    spec = ModelSpec(input_dim=3, hidden_dims=(), num_classes=3)
    layers = {("head", "weight"): np.arange(9.0).reshape(3, 3), ("head", "bias"): np.array([1.0, 2, 3])}
    theta = flatten(layers, spec.shape_map())
    out = forward_logits(spec, theta, np.array([1.0, 0, 0]))
    np.testing.assert_array_equal(out, layers[("head", "weight")][:, 0] + layers[("head", "bias")])


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_scripted_chain(act, rng):
    spec = ModelSpec(input_dim=6, hidden_dims=(5, 4), num_classes=3, activation=act)
    theta = init_params(spec, rng)
    for x in rng.normal(size=(5, 6)):
        np.testing.assert_allclose(forward_logits(spec, theta, x), scripted_logits(spec, theta, x),
                                   rtol=1e-13, atol=1e-13)


def test_shape_mismatch_is_domain_error(small_model):
    spec, theta = small_model
    with pytest.raises(DomainError):
        forward_logits(spec, theta, np.zeros(4))
    with pytest.raises(DomainError):
        forward_logits(ModelSpec(), theta, np.zeros(16))


def test_output_window_restricts_logits(rng):
    spec = ModelSpec(num_classes=8)
    theta = init_params(spec, rng)
    x = rng.normal(size=(3, 16))
    full = forward_logits(spec, theta, x)
    np.testing.assert_array_equal(forward_logits(spec.restricted((2, 6)), theta, x), full[:, 2:6])
    with pytest.raises(DomainError):
        spec.restricted((5, 9))


def test_gradient_vanishes_at_strict_minimum():
    # 1 input, 1 hidden tanh unit, 2 classes; the symmetric point is stationary
    spec = ModelSpec(input_dim=1, hidden_dims=(1,), num_classes=2, activation="tanh")
    theta = ParamVector.zeros(spec)
    X = np.array([[1.0], [-1.0]])
    y = np.array([0, 1])
    g = grad_loss(spec, theta, (X, np.array([[0.5, 0.5], [0.5, 0.5]])), LossSpec())
    assert np.linalg.norm(g.values) < 1e-8
    assert grad_loss(spec, theta, (X, y), LossSpec()).values.shape == (len(theta),)


def test_kd_gradient_vanishes_when_teacher_is_student(small_model, rng):
    spec, theta = small_model
    X = rng.normal(size=(8, 5))
    z = forward_logits(spec, theta, X)
    g = grad_loss(spec, theta, (X, z), LossSpec.kd(3.0, 3.0))
    assert np.linalg.norm(g.values) < 1e-10


@pytest.mark.parametrize("seed", range(12))
def test_gradient_matches_finite_differences(seed):
    assert gradient_case(seed) < 1e-4


def test_gradient_of_windowed_and_frozen_model(rng):
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), num_classes=6, activation="tanh").restricted((2, 5))
    theta = init_params(spec, rng)
    X, y = rng.normal(size=(4, 4)), rng.integers(0, 3, size=4)
    g = grad_loss(spec, theta, (X, y), LossSpec())
    fd = central_difference(lambda v: batch_loss(spec, theta.like(v), (X, y), LossSpec()), theta.values)
    assert rel_error(g.values, fd) < 1e-6
    frozen = ModelSpec(input_dim=4, hidden_dims=(5,), num_classes=6, activation="tanh", frozen_head=True)
    gf = grad_loss(frozen, theta, (X, y), LossSpec()).values
    fd = central_difference(lambda v: batch_loss(frozen, theta.like(v), (X, y), LossSpec()), theta.values)
    mask = trainable_mask(frozen)
    assert not mask.all()
    assert np.all(gf[~mask] == 0)
    np.testing.assert_allclose(gf[mask], fd[mask], rtol=1e-5, atol=1e-9)


def test_empty_batch_is_an_error(small_model):
    spec, theta = small_model
    with pytest.raises(DomainError):
        grad_loss(spec, theta, (np.zeros((0, 5)), np.zeros(0, dtype=int)), LossSpec())


def test_flatten_roundtrip_examples(rng):
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=2)
    zero = ParamVector.zeros(spec)
    assert all(np.all(a == 0) for a in unflatten(zero).values())
    theta = init_params(spec, rng)
    layers = unflatten(theta)
    back = flatten(layers, theta.shape_map)
    np.testing.assert_array_equal(back.values, theta.values)
    bumped = theta.values.copy()
    bumped[7] += 1.0
    changed = sum(int(np.sum(unflatten(theta.like(bumped))[k] != layers[k])) for k in layers)
    assert changed == 1


def test_flatten_size_mismatch(rng):
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=2)
    bad = unflatten(init_params(spec, rng))
    first = next(iter(bad))
    bad[first] = np.zeros(1)
    with pytest.raises(DomainError):
        flatten(bad, spec.shape_map())


def test_layer_partition_covers_parameters():
    spec = ModelSpec(hidden_dims=(32, 32), num_classes=16)
    smap = spec.shape_map()
    assert sum(s.size for s in smap) == spec.num_params
    theta = ParamVector.zeros(spec)
    sl = theta.slices()
    covered = np.zeros(len(theta), dtype=int)
    for s in sl.values():
        covered[s] += 1
    assert np.all(covered == 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_continuous_in_theta(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), num_classes=3)
    theta = init_params(spec, rng)
    x = rng.normal(size=4)
    d = rng.normal(size=len(theta))
    base = forward_logits(spec, theta, x)
    gaps = [np.abs(forward_logits(spec, theta.like(theta.values + h * d), x) - base).max()
            for h in (1e-1, 1e-3, 1e-5)]
    assert gaps[2] <= gaps[1] <= gaps[0] + 1e-12
    assert gaps[2] < 1e-3
