import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from spikegrid.signals import (
    AbcFrame, CarrierSpec, MovingWindow, PerUnitBases, SignalError, abc_to_dq, abc_to_dq0,
    abc_to_phasor, carrier_samples, dq_to_abc, phasor_to_abc, sliding_variance, threshold_wave,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
angle = st.floats(-20.0, 20.0, allow_nan=False)


def park_matrix(theta):
    """Textbook amplitude-invariant Park matrix, written independently."""
    k = 2.0 / 3.0
    s = 2.0 * np.pi / 3.0
    return k * np.array([
        [np.cos(theta), np.cos(theta - s), np.cos(theta + s)],
        [-np.sin(theta), -np.sin(theta - s), -np.sin(theta + s)],
        [0.5, 0.5, 0.5],
    ])


def test_balanced_set_maps_to_constant_dq():
    amp, phi = 1.3, 0.4
    for wt in np.linspace(0, 4 * np.pi, 17):
        a = amp * np.cos(wt + phi)
        b = amp * np.cos(wt + phi - 2 * np.pi / 3)
        c = amp * np.cos(wt + phi + 2 * np.pi / 3)
        d, q = abc_to_dq(AbcFrame(a, b, c), wt)
        assert d == pytest.approx(amp * np.cos(phi), abs=1e-12)
        assert q == pytest.approx(amp * np.sin(phi), abs=1e-12)


@given(finite, finite, finite, angle)
def test_park_matches_matrix_oracle(a, b, c, th):
    d, q, z = abc_to_dq0(a, b, c, th)
    ref = park_matrix(th) @ np.array([a, b, c])
    scale = 1.0 + abs(a) + abs(b) + abs(c)
    assert np.allclose([d, q, z], ref, atol=1e-12 * scale)


@given(finite, finite, angle)
def test_dq_round_trip(d, q, th):
    fr = dq_to_abc(d, q, th)
    d2, q2 = abc_to_dq(fr, th)
    assert d2 == pytest.approx(d, abs=1e-9 * (1 + abs(d) + abs(q)))
    assert q2 == pytest.approx(q, abs=1e-9 * (1 + abs(d) + abs(q)))
    assert fr.a + fr.b + fr.c == pytest.approx(0.0, abs=1e-9 * (1 + abs(d) + abs(q)))


@given(finite, finite, angle)
def test_phasor_helpers_agree(re, im, th):
    x = complex(re, im)
    abc = phasor_to_abc(x, th)
    assert abc_to_phasor(abc, th) == pytest.approx(x, abs=1e-9 * (1 + abs(x)))


def test_non_finite_input_rejected():
    with pytest.raises(SignalError):
        abc_to_dq(AbcFrame(float("nan"), 0.0, 0.0), 0.0)
    with pytest.raises(SignalError):
        abc_to_dq0(np.array([1.0, np.inf]), np.zeros(2), np.zeros(2), 0.0)


def test_per_unit_bases_of_laboratory_testbed():
    b = PerUnitBases.from_rms_line_to_neutral(110.0, 7500.0)
    assert b.v_base == pytest.approx(110.0 * math.sqrt(2))
    # peak-value bases give the same impedance base as 3 V_rms^2 / S
    assert b.z_base == pytest.approx(3 * 110.0 ** 2 / 7500.0)


# ---------------------------------------------------------------- carriers

def test_sawtooth_formula():
    spec = CarrierSpec(1e-4)
    ts = spec.period
    for t in np.linspace(0, 5 * ts, 101)[:-1]:
        n = math.floor(t / ts + 1e-12) + 1
        ref = (2 / ts) * (t - (2 * n - 1) / 2 * ts)
        assert threshold_wave(t, spec) == pytest.approx(ref, abs=1e-9)


@given(st.integers(1, 200), st.integers(0, 10_000))
def test_carrier_samples_periodic_and_in_range(n_per, k0):
    dt = 1e-6
    spec = CarrierSpec(n_per * dt)
    c = carrier_samples(3 * n_per, dt, spec, t0=k0 * dt)
    assert np.all(c >= -1.0) and np.all(c < 1.0)
    assert np.array_equal(c[:n_per], c[n_per: 2 * n_per])


def test_carrier_samples_match_threshold_wave():
    spec = CarrierSpec(1e-4, "triangular")
    dt = 1e-6
    c = carrier_samples(1000, dt, spec)
    ref = threshold_wave(np.arange(1000) * dt, spec)
    assert np.allclose(c, ref, atol=1e-9)


def test_carrier_period_must_divide_dt():
    with pytest.raises(SignalError):
        CarrierSpec(1e-4).steps_per_period(3e-5)
    with pytest.raises(SignalError):
        CarrierSpec(-1.0)


# ---------------------------------------------------------------- windows

@given(arrays(float, st.integers(2, 300), elements=st.floats(-100, 100)), st.integers(2, 50))
def test_moving_window_equals_numpy(xs, n):
    w = MovingWindow(n)
    for k, x in enumerate(xs):
        w.push(x)
        tail = xs[max(0, k + 1 - n): k + 1]
        assert w.count == min(k + 1, n)
        assert w.variance >= 0.0
        assert w.mean == pytest.approx(tail.mean(), abs=1e-7 * (1 + np.abs(tail).max()))
        assert w.variance == pytest.approx(np.var(tail), abs=1e-6 * (1 + tail.var() + np.abs(tail).max()))


@given(arrays(float, st.integers(1, 200), elements=st.floats(-10, 10)), st.integers(2, 40),
       st.integers(0, 60))
def test_window_extend_equals_push(xs, n, pre):
    a, b = MovingWindow(n), MovingWindow(n)
    warm = np.linspace(-1, 1, pre)
    for x in warm:
        a.push(x)
        b.push(x)
    for x in xs:
        a.push(x)
    b.extend(xs)
    assert np.array_equal(a.values(), b.values())
    assert a.variance == pytest.approx(b.variance, abs=1e-9)


def test_window_rejects_non_finite():
    w = MovingWindow(4)
    with pytest.raises(SignalError):
        w.push(float("inf"))
    with pytest.raises(SignalError):
        MovingWindow(1)


def test_window_drift_bounded_over_long_stream(rng):
    w = MovingWindow(100)
    xs = 1e4 + rng.normal(0, 1e-3, 20_000)
    for x in xs:
        w.push(x)
    assert w.variance == pytest.approx(np.var(xs[-100:]), rel=1e-6)


@given(arrays(float, st.integers(5, 200), elements=st.floats(-50, 50)), st.integers(2, 20))
def test_sliding_variance_oracle(xs, n):
    out = sliding_variance(xs, n)
    assert len(out) == len(xs) + 1
    assert np.all(np.isnan(out[:n]))
    for m in range(n, len(xs) + 1):
        ref = np.var(xs[m - n: m])
        assert out[m] == pytest.approx(ref, abs=1e-7 * (1 + np.abs(xs).max() ** 2))
