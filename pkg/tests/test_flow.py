import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gvcc.flow import (
    RF,
    DiffusionSchedule,
    IntegrationError,
    LatentState,
    TimeGrid,
    em_step,
    interpolate,
    ode_step,
    score_from_velocity,
    sde_drift,
    trig_schedule,
)


def test_rf_boundaries_and_monotonicity():
    assert (RF.alpha(0), RF.sigma(0), RF.alpha(1), RF.sigma(1)) == (1, 0, 0, 1)
    tr = trig_schedule()
    assert tr.alpha(0) == pytest.approx(1) and tr.sigma(1) == pytest.approx(1)
    for t in np.linspace(0.01, 0.99, 25):
        assert RF.alpha_dot(t) < 0 < RF.sigma_dot(t)
        assert tr.alpha_dot(t) < 0 < tr.sigma_dot(t)


def test_interpolate_examples():
    x0, x1 = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    assert interpolate(np.array(2.0), np.array(-1.0), 0.25) == 1.25
    with pytest.raises(ValueError):
        interpolate(x0, x1, 1.5)
    with pytest.raises(ValueError):
        interpolate(x0, np.zeros(3), 0.5)


def test_score_gaussian_example():
    # N(0,1) data, x=1, t=0.5: u = 0 and the marginal is N(0, 0.5)
    assert score_from_velocity(np.array(1.0), 0.5, np.array(0.0)) == -2.0
    assert score_from_velocity(np.array(-0.5), 0.5, np.array(1.0)) == 0.0
    with pytest.raises(ValueError):
        score_from_velocity(np.array(1.0), 0.0, np.array(0.0))


@given(st.floats(0.05, 0.95), st.floats(0.2, 3.0), st.floats(-4, 4))
@settings(max_examples=100, deadline=None)
def test_general_score_on_trig_schedule(t, s, x):
    # x0 ~ N(0, s^2): closed-form velocity and score for any schedule
    sch = trig_schedule()
    a, g, ad, gd = sch.alpha(t), sch.sigma(t), sch.alpha_dot(t), sch.sigma_dot(t)
    var = a * a * s * s + g * g
    u = (ad * a * s * s + gd * g) / var * x
    got = score_from_velocity(np.array(x), t, np.array(u), sch)
    assert got == pytest.approx(-x / var, rel=1e-9, abs=1e-12)


def test_drift_examples():
    d3 = DiffusionSchedule(3.0)
    assert d3(0.5) == 0.75
    assert sde_drift(np.array(1.0), 0.5, np.array(0.0), d3) == pytest.approx(0.5625, abs=1e-15)
    u = np.array([0.3, -1.2])
    assert sde_drift(np.array([5.0, 1.0]), 0.7, u, DiffusionSchedule(0.0)) is u


@given(st.floats(1e-4, 0.05), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 8))
@settings(max_examples=100, deadline=None)
def test_drift_vanishes_near_zero(t, x, u, gs):
    f = sde_drift(np.array(x), t, np.array(u), DiffusionSchedule(gs))
    bound = gs * gs * t**3 * (abs(u) + abs(x) / t * t) / 2 + 1e-15
    assert abs(f - u) <= bound


def test_ode_step_examples():
    s = ode_step(LatentState(np.array(1.0), 0.5), np.array(2.0), 0.05)
    assert s.data == pytest.approx(0.9, abs=1e-15) and s.t == pytest.approx(0.45)
    s = ode_step(LatentState(np.array([1.0, 2.0]), 1.0), np.zeros(2), 0.1)
    np.testing.assert_array_equal(s.data, [1.0, 2.0])
    with pytest.raises(ValueError):
        ode_step(LatentState(np.array(1.0), 0.01), np.array(0.0), 0.05)
    with pytest.raises(IntegrationError):
        ode_step(LatentState(np.array(1.0), 0.5), np.array(np.nan), 0.05)


def test_ode_gaussian_endpoint():
    # data N(0, s^2): the probability-flow map sends x1 to s * x1
    s, T = 0.6, 1000
    x = np.array([1.3, -0.4, 2.2])
    x1 = x.copy()
    for k, t in TimeGrid(T):
        u = (t - (1 - t) * s * s) / ((1 - t) ** 2 * s * s + t * t) * x
        x = ode_step(LatentState(x, t), u, 1.0 / T).data
    np.testing.assert_allclose(x, s * x1, rtol=1e-2)


def test_em_step_examples():
    st_ = LatentState(np.array(1.0), 0.5)
    assert em_step(st_, np.array(0.0), 0.75, 0.05, np.array(1.0)).data == pytest.approx(
        1 + 0.75 * math.sqrt(0.05), abs=1e-15)
    assert round(float(em_step(st_, np.array(0.0), 0.75, 0.05, np.array(1.0)).data), 5) == 1.16771
    d = np.array(0.4)
    assert em_step(st_, d, 0.0, 0.05, np.array(7.0)).data == ode_step(st_, d, 0.05).data
    assert em_step(st_, d, 2.0, 0.05, np.array(0.0)).data == ode_step(st_, d, 0.05).data
    with pytest.raises(IntegrationError):
        em_step(st_, d, 1.0, 0.05, np.array(np.inf))


def test_time_grid():
    g = TimeGrid(20, 3)
    assert [t for _, t in g][:2] == [1.0, 0.95]
    assert g.codebook_steps == 17 and g.is_codebook_step(16) and not g.is_codebook_step(17)
    with pytest.raises(ValueError):
        TimeGrid(5, 5)
