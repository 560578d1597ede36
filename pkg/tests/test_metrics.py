import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskmerge.data import LabeledSplit
from taskmerge.errors import DomainError
from taskmerge.metrics import (EvalResult, TaskEval, accuracy, fit_temperature, nll,
                               normalized_accuracy, predictive_entropy, reliability,
                               reliability_from_probs, scaling_sweep, temperature_scale_fit)
from taskmerge.model import ModelSpec, ParamVector, forward_logits, init_params


def test_accuracy_examples(rng):
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=4)
    zero = ParamVector.zeros(spec)
    data = LabeledSplit(rng.normal(size=(40, 3)), np.repeat(np.arange(4), 10))
    assert accuracy(spec, zero, data) == 0.25
    theta = init_params(spec, rng)
    memo = LabeledSplit(data.x, np.argmax(forward_logits(spec, theta, data.x), axis=1))
    assert accuracy(spec, theta, memo) == 1.0
    correct = sum(int(np.argmax(forward_logits(spec, theta, x)) == y) for x, y in zip(data.x, data.y))
    assert accuracy(spec, theta, data) == correct / len(data)
    with pytest.raises(DomainError):
        accuracy(spec, theta, LabeledSplit(np.zeros((0, 3)), np.zeros(0, dtype=int)))


def test_normalized_accuracy_examples():
    assert normalized_accuracy(0.8, 0.8) == 1.0
    assert normalized_accuracy(45.0, 90.0) == 0.5
    with pytest.raises(DomainError):
        normalized_accuracy(0.5, 0.0)


@given(st.floats(0.01, 1), st.floats(0.01, 1))
def test_normalized_accuracy_scale_consistent(a, b):
    assert normalized_accuracy(2 * a, 2 * b) == pytest.approx(normalized_accuracy(a, b), rel=1e-15)


def test_eval_result_averages_ratios_per_task():
    # ratio of means would be (0.9 + 0.5) / (1.0 + 0.6) = 0.875
    r = EvalResult([TaskEval("a", 0.9, 0.9 / 1.0, 0.1), TaskEval("b", 0.5, 0.5 / 0.6, 0.2)])
    assert r.mean_normalized_accuracy == pytest.approx((0.9 + 0.5 / 0.6) / 2)
    assert r.to_dict()["aggregate"]["accuracy"] == pytest.approx(0.7)


def test_predictive_entropy_examples(rng):
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=8)
    x = rng.normal(size=(10, 3))
    assert predictive_entropy(spec, ParamVector.zeros(spec), x) == pytest.approx(math.log(8))
    sharp = ParamVector.zeros(spec).values.copy()
    theta = ParamVector(sharp, spec.shape_map())
    sl = theta.slices()[("head", "bias")]
    sharp[sl] = np.r_[100.0, np.zeros(7)]
    assert predictive_entropy(spec, ParamVector(sharp, spec.shape_map()), x) < 1e-30


def test_reliability_examples():
    probs = np.array([[1.0, 0.0]] * 10)
    y = np.array([0] * 7 + [1] * 3)
    rep = reliability_from_probs(probs, y)
    assert rep.ece == pytest.approx(0.3)
    assert rep.total == 10
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=50)
    yy = rng.integers(0, 3, size=50)
    one = reliability_from_probs(p, yy, num_bins=1)
    conf = p.max(1).mean()
    acc = np.mean(p.argmax(1) == yy)
    assert one.ece == pytest.approx(abs(conf - acc))


def test_perfectly_calibrated_predictor_has_small_ece():
    rng = np.random.default_rng(0)
    N = 200_000
    conf = rng.uniform(0.5, 1.0, size=N)
    correct = rng.uniform(size=N) < conf
    probs = np.stack([conf, 1 - conf], axis=1)
    y = np.where(correct, 0, 1)
    assert reliability_from_probs(probs, y).ece < 0.01


@settings(max_examples=30)
@given(st.integers(1, 200), st.integers(1, 15), st.integers(0, 10_000))
def test_ece_bounds_and_counts(n, bins, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4) * 0.3, size=n)
    y = rng.integers(0, 4, size=n)
    rep = reliability_from_probs(p, y, bins)
    assert 0.0 <= rep.ece <= 1.0
    assert rep.total == n and len(rep.bins) == bins


def test_reliability_csv(tmp_path, rng):
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=3)
    data = LabeledSplit(rng.normal(size=(30, 3)), rng.integers(0, 3, size=30))
    rep = reliability(spec, init_params(spec, rng), data)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,conf,acc,count" and len(lines) == 11


def _calibrated_logits(n=20_000, seed=0):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=2.0, size=(n, 4))
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    y = np.array([rng.choice(4, p=row) for row in p])
    return logits, y


def test_temperature_fit_examples():
    logits, y = _calibrated_logits()
    T = fit_temperature(logits, y)
    assert T == pytest.approx(1.0, abs=0.05)
    T2 = fit_temperature(2 * logits, y)
    assert T2 == pytest.approx(2 * T, rel=1e-3)
    assert nll(2 * logits, y, T2) <= nll(2 * logits, y, 1.0)


def test_temperature_fit_degenerate_labels():
    with pytest.warns(RuntimeWarning):
        assert fit_temperature(np.zeros((5, 3)), np.zeros(5, dtype=int)) == 1.0


def test_temperature_scale_fit_on_model(desk):
    spec, pre, task = desk["specs"][0], desk["theta_pre"], desk["suite"].tasks[0]
    T = temperature_scale_fit(spec, pre, task.val)
    logits = forward_logits(spec, pre, task.val.x)
    assert 0.05 <= T <= 20 and nll(logits, task.val.y, T) <= nll(logits, task.val.y)


def test_scaling_sweep_endpoints_are_exact(desk):
    from taskmerge.trainer import TrainConfig, finetune

    spec, pre, task = desk["specs"][3], desk["theta_pre"], desk["suite"].tasks[3]
    ft = finetune(spec, pre, task.train, TrainConfig(steps=100, warmup_steps=10, seed=3))
    curve = dict(scaling_sweep(spec, pre, ft - pre, task.test))
    assert len(curve) == 31 and max(curve) == 3.0
    assert curve[0.0] == accuracy(spec, pre, task.test)
    assert curve[1.0] == accuracy(spec, ft, task.test)
