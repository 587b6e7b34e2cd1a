"""Desk-scale closed-loop RAN control lab.

A slot-level downlink MAC simulator plays the base station, a two-half agent
terminates an E2-style interface toward a near-real-time controller, and
pluggable xApps enforce per-UE guaranteed-bitrate SLAs by steering fixed
resource allocations.
"""

from .domain import (
    CellConfig,
    PolicySolution,
    UeAllocation,
    UeEstimate,
    UeProfile,
    UnsatisfiableDemandError,
    required_prbs,
    violation,
)
from .e2_codec import KpmRecord, KpmReport, SpsCommand, SpsEntry

__version__ = "0.1.0"

__all__ = [
    "CellConfig",
    "KpmRecord",
    "KpmReport",
    "PolicySolution",
    "SpsCommand",
    "SpsEntry",
    "UeAllocation",
    "UeEstimate",
    "UeProfile",
    "UnsatisfiableDemandError",
    "required_prbs",
    "violation",
    "__version__",
]
