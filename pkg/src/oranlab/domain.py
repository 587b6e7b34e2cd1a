"""Shared vocabulary types and the SLA arithmetic used by every other module.

Conventions used repo-wide: rates travel as floats in Mbps, PRB counts as
plain integers, and float comparisons elsewhere use a relative tolerance of
1e-9 (``REL_TOL``).  PRB demand alone is computed through exact rational
arithmetic on the float inputs so that the ceiling bounds hold without any
tolerance: ``required_prbs(s, eta) * eta >= s`` and one PRB fewer falls short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

REL_TOL = 1e-9


class UnsatisfiableDemandError(ValueError):
    """A PRB demand was requested for a UE whose per-PRB rate is zero."""


@dataclass(frozen=True)
class UeProfile:
    """Service contract for one UE: guaranteed bitrate and selection weight."""

    ue_id: int
    gbr_mbps: float
    weight: float = 1.0

    def __post_init__(self):
        if self.ue_id < 0:
            raise ValueError(f"ue_id must be non-negative, got {self.ue_id}")
        if self.gbr_mbps < 0:
            raise ValueError(f"gbr_mbps must be >= 0, got {self.gbr_mbps}")
        if self.weight <= 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")


@dataclass(frozen=True)
class CellConfig:
    """Static cell capacity and reporting cadence."""

    total_prbs: int
    slot_duration_us: int = 500
    report_period_ms: int = 100

    def __post_init__(self):
        if self.total_prbs < 1:
            raise ValueError(f"total_prbs must be >= 1, got {self.total_prbs}")
        if self.slot_duration_us < 1:
            raise ValueError("slot_duration_us must be >= 1")
        if self.report_period_ms < 1:
            raise ValueError("report_period_ms must be >= 1")
        if (self.report_period_ms * 1000) % self.slot_duration_us != 0:
            raise ValueError(
                "report_period_ms must be a whole number of slots "
                f"({self.report_period_ms} ms vs {self.slot_duration_us} us slots)"
            )

    @property
    def slots_per_report(self) -> int:
        return (self.report_period_ms * 1000) // self.slot_duration_us

    @property
    def slot_duration_s(self) -> float:
        return self.slot_duration_us / 1e6


@dataclass
class UeEstimate:
    """Measured per-PRB throughput and activity for one UE.

    ``eta_mbps_per_prb`` is None until the UE has ever been served.
    ``demand_prbs`` is the integer PRB count needed to reach the UE's GBR at
    the current estimate (None when no estimate or the demand is undefined).
    """

    ue_id: int
    eta_mbps_per_prb: float | None = None
    active: bool = False
    demand_prbs: int | None = None


@dataclass(frozen=True)
class UeAllocation:
    """One UE's share of a policy solution."""

    ue_id: int
    prbs: int
    expected_violation_mbps: float
    selected: bool = True


@dataclass(frozen=True)
class PolicySolution:
    """Per-UE PRB allocation produced by a policy solver."""

    entries: tuple[UeAllocation, ...] = field(default_factory=tuple)

    @property
    def total_prbs(self) -> int:
        return sum(e.prbs for e in self.entries)

    @property
    def total_violation_mbps(self) -> float:
        return sum(e.expected_violation_mbps for e in self.entries)

    def by_ue(self) -> dict[int, UeAllocation]:
        return {e.ue_id: e for e in self.entries}


def violation(sla_mbps: float, throughput_mbps: float) -> float:
    """Shortfall of delivered throughput below the guaranteed rate, floored at zero."""
    return max(0.0, sla_mbps - throughput_mbps)


def required_prbs(sla_mbps: float, eta_mbps_per_prb: float) -> int:
    """Smallest integer PRB count whose delivered rate reaches ``sla_mbps``.

    Raises :class:`UnsatisfiableDemandError` when the per-PRB rate is zero (or
    negative) and the demand is positive; callers decide how to exclude such a
    UE from contention.
    """
    if sla_mbps < 0:
        raise ValueError(f"sla_mbps must be >= 0, got {sla_mbps}")
    if sla_mbps == 0:
        return 0
    if eta_mbps_per_prb <= 0:
        raise UnsatisfiableDemandError(
            f"per-PRB rate {eta_mbps_per_prb} cannot satisfy {sla_mbps} Mbps"
        )
    # Exact ceiling over the binary values of the float inputs.
    return int(math.ceil(Fraction(sla_mbps) / Fraction(eta_mbps_per_prb)))
