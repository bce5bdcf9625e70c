import logging
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ivba.robust_loss import (
    DELTA_MAX,
    LossParams,
    ObservationCovariance,
    delta_from_cost,
    huber_eval,
    huber_weight,
    level_sigma2,
)

xs = st.floats(0.0, 1e4, allow_nan=False)
deltas = st.floats(0.0, 10.0, allow_nan=False)


def test_huber_examples():
    assert huber_eval(1.0, 2.0) == 1.0
    assert huber_eval(4.0, 2.0) == 4.0
    assert 2 * 2.0 * (math.sqrt(4.0) - 1.0) == 4.0  # other branch at the knot
    assert huber_eval(9.0, 2.0) == 8.0


def test_weight_examples():
    assert huber_weight(1.0, 2.0) == 1.0
    assert huber_weight(9.0, 2.0) == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert huber_weight(5.0, 0.0) == 0.0
    assert huber_weight(0.0, 0.0) == 0.0


def test_delta_zero_rejects_everything():
    x = np.array([0.0, 1.0, 100.0])
    np.testing.assert_array_equal(huber_eval(x, 0.0), 0.0)


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        huber_eval(-1.0, 1.0)
    with pytest.raises(ValueError):
        huber_weight(1.0, -1.0)


def test_literal_branch_differs():
    # x = 3 lies between delta and delta^2 for delta = 2
    assert huber_eval(3.0, 2.0, "literal") == pytest.approx(2 * 2 * (math.sqrt(3) - 1))
    assert huber_eval(3.0, 2.0) == 3.0
    with pytest.raises(ValueError):
        huber_eval(1.0, 1.0, "other")


@given(xs, deltas)
def test_loss_never_exceeds_quadratic(x, d):
    assert huber_eval(x, d) <= x + 1e-12 * max(1.0, x)


@given(deltas)
def test_continuous_at_knot(d):
    x = d * d
    above = 2 * d * (math.sqrt(x) - d / 2)
    assert abs(huber_eval(x, d) - x) <= 1e-12 * max(1.0, x)
    assert abs(above - x) <= 1e-12 * max(1.0, x)


@given(st.floats(1e-3, 1e3), st.floats(0.1, 10.0))
def test_weight_is_derivative(x, d):
    assume(abs(x - d * d) > 1e-3 * max(1.0, d * d))
    h = 1e-6 * max(x, 1e-3)
    num = (huber_eval(x + h, d) - huber_eval(x - h, d)) / (2 * h)
    w = huber_weight(x, d)
    assert abs(num - w) <= 1e-5 * max(abs(w), 1e-12)


@given(xs, xs, deltas)
def test_loss_monotone(a, b, d):
    lo, hi = min(a, b), max(a, b)
    assert huber_eval(lo, d) <= huber_eval(hi, d) + 1e-9


@given(xs, deltas)
def test_weight_in_unit_interval(x, d):
    assert 0.0 <= huber_weight(x, d) <= 1.0


def test_delta_from_cost_examples():
    assert delta_from_cost(0.0, 7.82) == 7.82
    assert delta_from_cost(1.0) == 0.0
    assert delta_from_cost(0.5, 7.82) == pytest.approx(2.6067, abs=5e-5)
    assert DELTA_MAX == 7.82


def test_delta_from_cost_strictly_decreasing():
    d = delta_from_cost(np.linspace(0, 1, 100))
    assert np.all(np.diff(d) < 0)


def test_delta_from_cost_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        out = delta_from_cost(np.array([-0.1, 1.2]))
    np.testing.assert_array_equal(out, [7.82, 0.0])
    assert "clamped" in caplog.text


@given(st.floats(0, 1))
def test_delta_in_range(c):
    assert 0.0 <= delta_from_cost(c) <= DELTA_MAX


def test_loss_params_validation():
    LossParams(0.0)
    LossParams(7.82)
    with pytest.raises(ValueError):
        LossParams(8.0)
    with pytest.raises(ValueError):
        LossParams(-1e-9)


def test_observation_covariance_levels():
    s = [ObservationCovariance(level=k).sigma2 for k in range(6)]
    assert s[0] == 1.0
    assert s[2] == pytest.approx(1.2**4)
    assert all(b >= a for a, b in zip(s, s[1:]))
    np.testing.assert_allclose(level_sigma2(np.arange(3)), [1.0, 1.44, 1.44**2])
