import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oranlab.domain import (
    CellConfig,
    PolicySolution,
    UeAllocation,
    UeProfile,
    UnsatisfiableDemandError,
    required_prbs,
    violation,
)

RATES = st.floats(min_value=0.0, max_value=1e4, allow_nan=False, allow_infinity=False)
POS_RATES = st.floats(min_value=1e-6, max_value=1e4, allow_nan=False, allow_infinity=False)


class TestViolation:
    def test_pf_steady_state_shortfall(self):
        assert violation(15, 8.67) == pytest.approx(6.33, rel=1e-9)

    def test_clamped_at_zero_when_throughput_exceeds_sla(self):
        assert violation(5, 8.67) == 0.0

    def test_exact_satisfaction(self):
        assert violation(10, 10) == 0.0

    @given(sla=RATES, thr=RATES)
    def test_never_negative(self, sla, thr):
        assert violation(sla, thr) >= 0.0

    @given(sla=RATES, thr=RATES, more=POS_RATES)
    def test_monotone_non_increasing_in_throughput(self, sla, thr, more):
        assert violation(sla, thr + more) <= violation(sla, thr)


class TestRequiredPrbs:
    def test_rounds_up(self):
        assert required_prbs(15, 0.4) == 38
        assert 38 * 0.4 >= 15

    def test_exact_division(self):
        assert required_prbs(10, 0.4) == 25

    def test_zero_demand(self):
        assert required_prbs(0, 0.4) == 0

    def test_zero_rate_is_typed_error(self):
        with pytest.raises(UnsatisfiableDemandError):
            required_prbs(5, 0.0)

    @given(sla=POS_RATES, eta=POS_RATES)
    def test_ceiling_bounds_exact(self, sla, eta):
        p = required_prbs(sla, eta)
        assert p * Fraction(eta) >= Fraction(sla)
        assert (p - 1) * Fraction(eta) < Fraction(sla)


class TestTypes:
    def test_profile_validation(self):
        with pytest.raises(ValueError):
            UeProfile(ue_id=1, gbr_mbps=-1)
        with pytest.raises(ValueError):
            UeProfile(ue_id=1, gbr_mbps=5, weight=0)

    def test_cell_requires_whole_slots_per_window(self):
        with pytest.raises(ValueError):
            CellConfig(total_prbs=65, slot_duration_us=700, report_period_ms=100)
        cell = CellConfig(total_prbs=65)
        assert cell.slots_per_report == 200
        assert cell.slot_duration_s == pytest.approx(0.0005)

    def test_solution_totals(self):
        sol = PolicySolution(entries=(
            UeAllocation(ue_id=1, prbs=37, expected_violation_mbps=0.2),
            UeAllocation(ue_id=2, prbs=25, expected_violation_mbps=0.0),
            UeAllocation(ue_id=3, prbs=3, expected_violation_mbps=3.8),
        ))
        assert sol.total_prbs == 65
        assert sol.total_violation_mbps == pytest.approx(4.0)
        assert sol.by_ue()[2].prbs == 25
