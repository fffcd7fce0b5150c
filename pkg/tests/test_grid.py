import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microshed.grid import (
    CONVENTIONAL,
    INVERTER,
    BoundsViolation,
    DegenerateLoadError,
    EmptyBankError,
    GeneratorSpec,
    GridModelError,
    InfeasibleShedError,
    LoadBank,
    LoadUnit,
    PrioritySchema,
    bank_stats,
    grade_band,
    load_power,
    select_shedding_set,
    system_stats,
    total_generation,
    utilization_level,
    weighted_delta,
    weighted_remaining,
    weighted_total,
)
from oracles import weighted_kept_oracle, weighted_shed_oracle

W = PrioritySchema((1.0, 2.0, 5.0))
TABLE_II = [
    (1, 100, (0.5, 0.3, 0.2)),
    (2, 120, (0.6, 0.2, 0.2)),
    (3, 150, (0.5, 0.3, 0.2)),
    (4, 100, (0.3, 0.5, 0.2)),
    (5, 100, (0.3, 0.5, 0.2)),
    (6, 120, (0.5, 0.3, 0.2)),
]
# frozen from the brute-force sum over the case-1 units (tests/oracles.py)
SYSTEM_POOLS = (317.0, 235.0, 138.0)


def table_ii_banks():
    return [LoadBank.from_ratios(b, t, 2.0, r) for b, t, r in TABLE_II]


def uniform_bank(n=50, ratios=(0.5, 0.3, 0.2), power=2.0):
    return LoadBank.from_ratios(1, n * power, power, ratios)


class TestGenerators:
    def test_total_generation_table_i(self):
        caps = [30, 185, 30, 40, 150, 180]
        gens = [
            GeneratorSpec(i + 1, INVERTER if c == 30 else CONVENTIONAL, c, output=c,
                          inertia=None if c == 30 else 1.0, droop=1.5e-3 if c == 30 else None)
            for i, c in enumerate(caps)
        ]
        assert total_generation(caps, gens) == 615.0

    def test_trivial_sums(self):
        assert total_generation([0.0] * 6) == 0.0
        assert total_generation({1: 42.5}) == 42.5

    def test_bounds_violation(self):
        g = GeneratorSpec(1, CONVENTIONAL, 100, p_max=80, inertia=1.0)
        with pytest.raises(BoundsViolation):
            total_generation([90.0], [g])

    @pytest.mark.parametrize("kw", [
        dict(capacity=0, inertia=1.0),
        dict(capacity=10, p_max=20, inertia=1.0),
        dict(capacity=10, inertia=None),
        dict(capacity=10, kind=INVERTER),
    ])
    def test_invalid_specs(self, kw):
        kw = {"kind": CONVENTIONAL, **kw}
        with pytest.raises(GridModelError):
            GeneratorSpec(1, **kw)


class TestLoadPower:
    def test_base_point(self):
        assert load_power(LoadUnit(2.0, 1)) == 2.0

    def test_frequency_term(self):
        assert load_power(LoadUnit(2.0, 1), df=-0.5 / 50, kappa_f=1.0) == pytest.approx(1.98, abs=1e-12)

    def test_frequency_and_voltage(self):
        assert load_power(LoadUnit(2.0, 1), -0.01, -0.01, 1.0, 1.0) == pytest.approx(1.96, abs=1e-12)

    def test_inactive_contributes_nothing(self):
        assert load_power(LoadUnit(2.0, 1, active=False), -0.01) == 0.0

    def test_degenerate_factor(self):
        with pytest.raises(DegenerateLoadError):
            load_power(LoadUnit(2.0, 1), df=-1.0)


class TestBankStats:
    def test_load1(self):
        st_ = bank_stats(table_ii_banks()[0], 3)
        assert st_.p_max == 100
        np.testing.assert_allclose(st_.rho, [0.5, 0.3, 0.2], atol=1e-12)

    def test_single_unit(self):
        b = LoadBank.from_units(1, [LoadUnit(3.0, 1)])
        np.testing.assert_array_equal(bank_stats(b, 3).rho, [1, 0, 0])

    def test_system_table_ii(self):
        s = system_stats(table_ii_banks(), 3)
        assert s.p_max == pytest.approx(690)
        np.testing.assert_allclose(s.rho * s.p_max, SYSTEM_POOLS, atol=1e-9)
        np.testing.assert_allclose(s.rho, [0.4594, 0.3406, 0.2000], atol=5e-5)

    def test_empty_bank(self):
        b = LoadBank(1, np.array([]), np.array([], int), np.array([], bool))
        with pytest.raises(EmptyBankError):
            bank_stats(b)

    def test_from_ratios_remainder_unit(self):
        b = LoadBank.from_ratios(3, 150, 2.0, (0.5, 0.3, 0.2))
        pools = np.bincount(b.grade - 1, weights=b.base)
        np.testing.assert_allclose(pools, [75, 45, 30])
        assert sorted(set(b.base)) == [1.0, 2.0]


class TestWeighted:
    def test_weighted_total_table_ii(self):
        s = system_stats(table_ii_banks(), 3)
        assert weighted_total(s.rho, s.p_max, W) == pytest.approx(1477.0)

    def test_uniform_weights(self):
        assert weighted_total([0.2, 0.3, 0.5], 80, (1.0, 1.0, 1.0)) == pytest.approx(80.0)

    def test_weighted_total_trivial(self):
        assert weighted_total([1, 0, 0], 100, W) == 100
        rho = (0.25, 0.25, 0.5)
        assert weighted_total(rho, 100, PrioritySchema((1, 1.5, 2))) == pytest.approx(162.5)

    def test_weighted_delta_example(self):
        rho = np.array(SYSTEM_POOLS) / 690
        assert weighted_delta(120, rho, 690, W) == pytest.approx(600.0)

    def test_weighted_delta_ends(self):
        rho = np.array(SYSTEM_POOLS) / 690
        assert weighted_delta(0, rho, 690, W) == 0
        assert weighted_delta(690, rho, 690, W) == pytest.approx(weighted_total(rho, 690, W))

    def test_weighted_delta_infeasible(self):
        with pytest.raises(InfeasibleShedError):
            weighted_delta(700, [0.5, 0.3, 0.2], 690, W)

    def test_weighted_remaining_examples(self):
        assert weighted_remaining(0.9, (0.5, 0.3, 0.2), 100, W) == pytest.approx(160.0)
        assert weighted_remaining(0.0, (0.5, 0.3, 0.2), 100, W) == 0.0
        assert weighted_remaining(0.5, (0.5, 0.3, 0.2), 100, W) == pytest.approx(50.0)
        assert grade_band(0.5, (0.5, 0.3, 0.2)) == 1
        assert grade_band(0.5 + 1e-9, (0.5, 0.3, 0.2)) == 2

    def test_weighted_remaining_full_sums_to_total(self):
        banks = table_ii_banks()
        full = sum(weighted_remaining(1.0, bank_stats(b, 3).rho, b.p_max, W) for b in banks)
        s = system_stats(banks, 3)
        assert full == pytest.approx(weighted_total(s.rho, s.p_max, W))

    def test_oracle_agreement_on_table_ii(self):
        units = [(float(p), int(g)) for b in table_ii_banks() for p, g in zip(b.base, b.grade)]
        rho = np.array(SYSTEM_POOLS) / 690
        for amount in range(0, 691, 23):
            ref = weighted_shed_oracle(units, W.weights, amount)
            assert weighted_delta(amount, rho, 690, W) == pytest.approx(float(ref), rel=1e-12)


class TestUtilization:
    def test_levels(self):
        b = uniform_bank()
        assert utilization_level(b) == 1.0
        assert utilization_level(b.with_active(np.zeros(50, bool))) == 0.0
        act = np.ones(50, bool)
        act[:10] = False
        assert utilization_level(b.with_active(act)) == pytest.approx(0.8)


class TestSelectShedding:
    def test_trivial_targets(self):
        b = uniform_bank()
        assert select_shedding_set(b, 1.0, W).all()
        assert not select_shedding_set(b, 0.0, W).any()

    def test_example_075(self):
        b = uniform_bank()
        flags = select_shedding_set(b, 0.75, W)
        # oracle: enumerate shed counts per grade, keep the largest feasible
        # load, then the smallest weighted remainder
        best = None
        for n1, n2, n3 in itertools.product(range(26), range(16), range(11)):
            kept = 100 - 2 * (n1 + n2 + n3)
            if kept > 75:
                continue
            wk = 2 * ((25 - n1) * 1 + (15 - n2) * 2 + (10 - n3) * 5)
            key = (kept, -wk)
            if best is None or key > best[0]:
                best = (key, (n1, n2, n3))
        shed = ~flags
        counts = tuple(int(np.sum(shed & (b.grade == g))) for g in (1, 2, 3))
        assert counts == best[1] == (0, 3, 10)
        assert utilization_level(b.with_active(flags)) == pytest.approx(0.74)

    def test_tiebreak_highest_index_first(self):
        b = uniform_bank(10, (1.0,))
        flags = select_shedding_set(b, 0.8, PrioritySchema((1.0,)))
        np.testing.assert_array_equal(np.flatnonzero(~flags), [8, 9])

    def test_never_reenergises(self):
        b = uniform_bank(10)
        act = np.ones(10, bool)
        act[0] = False
        flags = select_shedding_set(b.with_active(act), 1.0, W)
        assert not flags[0]


@st.composite
def random_bank(draw, max_units=12):
    n = draw(st.integers(1, max_units))
    grades = draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))
    active = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    power = draw(st.sampled_from([1.0, 2.0, 2.5]))
    return LoadBank(1, np.full(n, power), np.array(grades), np.array(active))


@settings(max_examples=200, deadline=None)
@given(random_bank(), st.floats(0, 1))
def test_priority_order_never_violated(bank, u):
    flags = select_shedding_set(bank, u, W)
    newly = bank.active & ~flags
    still = flags
    for g in (1, 2):
        if np.any(newly & (bank.grade == g)):
            assert not np.any(still & (bank.grade > g))
    assert bank.base[flags].sum() <= u * bank.p_max + 1e-9 * bank.p_max


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.05, 1))
def test_weighted_delta_continuous_nondecreasing(a, b, scale):
    rho = np.array(SYSTEM_POOLS) / 690
    P = 690 * scale
    x, y = sorted((a * P, b * P))
    dx, dy = weighted_delta(x, rho, P, W), weighted_delta(y, rho, P, W)
    assert dy >= dx - 1e-9
    assert dy - dx <= 5.0 * (y - x) + 1e-9


@pytest.mark.parametrize("grade_lo,grade_hi,w", [(0.0, 0.2, 5.0), (0.2, 0.5406, 2.0), (0.5406, 1.0, 1.0)])
def test_weighted_delta_slope_per_band(grade_lo, grade_hi, w):
    rho = np.array(SYSTEM_POOLS) / 690
    mid = 0.5 * (grade_lo + grade_hi) * 690
    h = 1e-3
    slope = (weighted_delta(mid + h, rho, 690, W) - weighted_delta(mid - h, rho, 690, W)) / (2 * h)
    assert slope == pytest.approx(w, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=3, max_size=3).filter(lambda c: sum(c) > 0))
def test_rho_sums_to_one(counts):
    units = [LoadUnit(2.0, g + 1) for g, c in enumerate(counts) for _ in range(c)]
    rho = bank_stats(LoadBank.from_units(1, units), 3).rho
    assert math.isclose(rho.sum(), 1.0, abs_tol=1e-12)
