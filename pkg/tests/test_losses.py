import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _helpers import smoothed_ce_oracle
from taskmerge.errors import DomainError
from taskmerge.losses import LossSpec, ce_loss, focal_loss, kd_soft_loss, mixup_pair


def test_ce_uniform_prediction_is_alpha_independent():
    for a in (0.0, 0.1, 0.5, 1.0):
        assert ce_loss([0.0, 0.0], 1, a) == pytest.approx(math.log(2), rel=1e-14)


def test_ce_confident_limit_and_full_smoothing():
    assert ce_loss([50.0, 0.0, 0.0], 0, 0.0) < 1e-20
    z = np.array([1.0, -2.0, 0.5, 3.0])
    logp = z - np.log(np.exp(z).sum())
    assert ce_loss(z, 2, 1.0) == pytest.approx(-logp.mean(), rel=1e-14)


@given(arrays(np.float64, 5, elements=st.floats(-30, 30)), st.integers(0, 4), st.floats(0, 1))
def test_ce_matches_direct_formula(z, y, a):
    assert ce_loss(z, y, a) == pytest.approx(smoothed_ce_oracle(z, y, a), rel=1e-10, abs=1e-12)


def test_ce_rejects_bad_inputs():
    with pytest.raises(DomainError):
        ce_loss([0.0, 1.0], 2)
    with pytest.raises(DomainError):
        ce_loss([0.0, 1.0], 0, 1.5)


def test_focal_examples():
    z = np.array([0.3, -1.2, 2.0])
    assert focal_loss(z, 1, 0.0) == pytest.approx(ce_loss(z, 1, 0.0), rel=1e-14)
    assert focal_loss([40.0, 0.0], 0, 2.0) < 1e-30
    assert focal_loss([0.0, 0.0], 0, 10.0) == pytest.approx(0.5 ** 10 * math.log(2), rel=1e-12)
    assert focal_loss([0.0, 0.0], 0, 10.0) == pytest.approx(6.77e-4, abs=1e-6)
    with pytest.raises(DomainError):
        focal_loss(z, 3, 1.0)
    with pytest.raises(DomainError):
        focal_loss(z, 0, -1.0)


def test_mixup_endpoints_and_midpoint():
    x1, x2 = np.array([1.0, 2.0]), np.array([-1.0, 0.0])
    x, t = mixup_pair(x1, 0, x2, 2, 1.0, num_classes=3)
    np.testing.assert_array_equal(x, x1)
    np.testing.assert_array_equal(t, [1, 0, 0])
    x, t = mixup_pair(x1, 0, x2, 2, 0.0, num_classes=3)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(t, [0, 0, 1])
    _, t = mixup_pair(x1, 0, x2, 2, 0.5, num_classes=3)
    np.testing.assert_array_equal(t, [0.5, 0, 0.5])
    with pytest.raises(DomainError):
        mixup_pair(x1, 0, np.zeros(3), 1, 0.5)
    x, t = mixup_pair(x1, 0, x2, 1, rng=np.random.default_rng(0), num_classes=2)
    assert 0 <= t[0] <= 1 and t.sum() == pytest.approx(1.0)


def test_kd_examples():
    z = np.array([0.2, -1.0, 3.0])
    assert kd_soft_loss(z, z, 2.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    expected = (2 / 3) * math.log((2 / 3) / 0.5) + (1 / 3) * math.log((1 / 3) / 0.5)
    assert kd_soft_loss([math.log(2), 0.0], [0.0, 0.0], 1.0, 1.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.0566, abs=5e-5)


@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)),
       st.floats(0.2, 5), st.floats(0.2, 5), st.floats(0.5, 4))
def test_kd_prefactor_is_product_of_temperatures(a, b, t1, t2, c):
    def log_softmax(z, T):
        z = z / T
        m = z.max()
        return z - m - math.log(np.exp(z - m).sum())

    # exact KL; a probability floor would distort very sharp students
    lp, lq = log_softmax(a, c * t1), log_softmax(b, c * t2)
    base = float(np.sum(np.exp(lp) * (lp - lq)))
    assert kd_soft_loss(a, b, c * t1, c * t2) == pytest.approx((c * t1) * (c * t2) * base,
                                                               rel=1e-9, abs=1e-12)


def test_loss_spec_defaults_and_validation():
    assert LossSpec.label_smoothing().alpha == 0.1
    assert LossSpec.focal().gamma == 10.0
    with pytest.raises(DomainError):
        LossSpec("hinge")
    with pytest.raises(DomainError):
        LossSpec.kd(0.0, 1.0)
