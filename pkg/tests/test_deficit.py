import math

import pytest
from hypothesis import given, settings, strategies as st

from microshed.deficit import (
    FrequencyMeasurement,
    RocofMeter,
    deficit_conventional,
    deficit_inverter,
    predict_timing,
    shedding_window,
    system_inertia,
)
from microshed.engine import step_frequency
from microshed.grid import CONVENTIONAL, INVERTER, GeneratorSpec


def test_conventional_case2_rocof():
    pu = 2 * 1.68 / 50 * 1.75
    assert pu == pytest.approx(0.1176)
    assert deficit_conventional(1.68, 50, -1.75, 185) == pytest.approx(21.756)


def test_conventional_trivial_and_unit():
    assert deficit_conventional(1.68, 50, 0.0, 185) == 0.0
    assert deficit_conventional(1.0, 50, -25, 100) == pytest.approx(100.0)


def test_conventional_surplus_sign():
    assert deficit_conventional(1.0, 50, 1.0, 100) < 0


def test_conventional_invalid():
    with pytest.raises(ValueError):
        deficit_conventional(0.0, 50, -1, 100)


def test_inverter_examples():
    assert deficit_inverter(-0.5, 1.5e-3) == pytest.approx(2.0944, abs=1e-4)
    assert deficit_inverter(0.0, 1.5e-3) == 0.0
    assert deficit_inverter(-0.15, 1.5e-3) * 1000 == pytest.approx(628.3, abs=0.05)


def test_timing_example():
    tp = predict_timing(2.0, 0.1, 50, 49.5, 47.5)
    assert tp.t_fa == pytest.approx(2.0)
    assert tp.t_tr < tp.t_fa


def test_timing_trivial():
    assert predict_timing(2.0, 0.1, 50, 50, 47.5).t_tr == 0.0
    a, b = predict_timing(2.0, 0.1, 50, 49.5, 47.5), predict_timing(4.0, 0.1, 50, 49.5, 47.5)
    assert b.t_tr == pytest.approx(2 * a.t_tr) and b.t_fa == pytest.approx(2 * a.t_fa)
    assert math.isinf(predict_timing(2.0, 0.0, 50, 49.5, 47.5).t_fa)


def test_shedding_window_arithmetic():
    assert shedding_window(2.0, 0.32, 0.2) == pytest.approx(2.0 - 0.32 - 0.2)


def test_measurement_positive_frequency():
    with pytest.raises(ValueError):
        FrequencyMeasurement(1, 0.0, 0.0, 0.0)


def test_system_inertia_ignores_inverters():
    gens = [GeneratorSpec(1, CONVENTIONAL, 100, inertia=2.0), GeneratorSpec(2, INVERTER, 100, droop=1e-3)]
    assert system_inertia(gens) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_deficit_monotone(a, b):
    lo, hi = sorted((a, b))
    if hi > lo * (1 + 1e-9):
        assert deficit_conventional(1.5, 50, -hi, 100) > deficit_conventional(1.5, 50, -lo, 100)
        assert deficit_inverter(-hi, 1e-3) > deficit_inverter(-lo, 1e-3)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_timing_decreasing_in_deficit(a, b):
    lo, hi = sorted((a, b))
    if hi > lo * (1 + 1e-9):
        assert predict_timing(2, hi, 50, 49.5, 47.5).t_fa < predict_timing(2, lo, 50, 49.5, 47.5).t_fa


def test_closed_loop_round_trip():
    """A constant-deficit trajectory fed back through the ROCOF estimator recovers the deficit."""
    H, dp, dt = 2.0, 0.1, 1e-3
    meter = RocofMeter(5)
    f, t = 50.0, 0.0
    meter.update(t, f)
    for _ in range(500):
        f = step_frequency(f, dp, H, 50, dt)
        t += dt
        rocof = meter.update(t, f)
    assert deficit_conventional(H, 50, rocof, 1.0) == pytest.approx(dp, rel=0.01)


def test_rocof_meter_rejects_time_reversal():
    m = RocofMeter()
    m.update(1.0, 50)
    with pytest.raises(ValueError):
        m.update(1.0, 49.9)
