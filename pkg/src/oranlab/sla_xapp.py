"""SLA-enforcement control logic.

Every report window the xApp re-estimates each UE's per-PRB throughput from
telemetry, checks whether the guaranteed-bitrate demands fit the cell, and
issues fixed-allocation directives:

* no contention: every active UE gets exactly its demand (GBR floor);
* contention, ``soft`` policy: integer PRB allocation minimizing the summed
  SLA violation (equivalently maximizing summed capped throughput), solved
  exactly by a marginal-gain greedy over single PRBs;
* contention, ``strict`` policy: a 0/1 knapsack selects the maximum-weight
  subset of UEs to serve at full GBR, the rest split the leftover PRBs;
* ``baseline``: no directives at all, dynamic scheduling only.

A command batch is only emitted when the target allocation changed, and a
failed acknowledgment causes a re-issue on the next cycle.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping

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
from .e2_codec import KpmReport, SpsCommand, SpsEntry
from .ric import ControlOutcome, Indication
from .xapp_sdk import XappHandle

log = logging.getLogger(__name__)

STALE_PERIODS = 3

#: Marginal gains at or below this are treated as satisfied demand.
_GAIN_EPS = 1e-12

#: Gains within this relative distance of the best are tied: product noise in
#: ``sla - p*eta`` sits around 1e-14 relative, far below real distinctions.
_TIE_REL = 1e-12


class PolicyKind(enum.Enum):
    SOFT = "soft"
    STRICT = "strict"
    BASELINE = "baseline"


def update_estimates(
    report: KpmReport,
    cell: CellConfig,
    profiles: Mapping[int, UeProfile],
    previous: Mapping[int, UeEstimate],
) -> dict[int, UeEstimate]:
    """Recompute per-PRB throughput from one window's totals.

    A served UE's estimate comes wholly from this window (bits per PRB-slot
    over the slot duration, which is exact under a constant channel).  An
    unserved UE keeps its previous estimate and is marked inactive.
    """
    estimates = {u: UeEstimate(ue_id=u, eta_mbps_per_prb=e.eta_mbps_per_prb,
                               active=False, demand_prbs=e.demand_prbs)
                 for u, e in previous.items()}
    for rec in report.records:
        prev = estimates.get(rec.ue_id)
        eta = prev.eta_mbps_per_prb if prev else None
        if rec.prb_slots > 0:
            # bits per PRB-microsecond is exactly Mbps per PRB
            eta = rec.tbs_bits / (rec.prb_slots * cell.slot_duration_us)
        demand = None
        profile = profiles.get(rec.ue_id)
        if eta is not None and eta > 0 and profile is not None:
            demand = required_prbs(profile.gbr_mbps, eta)
        estimates[rec.ue_id] = UeEstimate(
            ue_id=rec.ue_id, eta_mbps_per_prb=eta,
            active=rec.tbs_bits > 0, demand_prbs=demand,
        )
    return estimates


def detect_contention(
    estimates: Mapping[int, UeEstimate],
    profiles: Mapping[int, UeProfile],
    total_prbs: int,
) -> bool:
    """True iff the active UEs' summed PRB demands exceed the cell capacity.

    An active UE without an estimate yet does not contend this cycle; it is
    left to dynamic scheduling until a served window produces one.
    """
    total = 0
    for est in estimates.values():
        if not est.active or est.ue_id not in profiles:
            continue
        if est.eta_mbps_per_prb is None or est.eta_mbps_per_prb <= 0:
            continue
        total += required_prbs(profiles[est.ue_id].gbr_mbps, est.eta_mbps_per_prb)
    return total > total_prbs


def _contenders(
    profiles: Mapping[int, UeProfile],
    estimates: Mapping[int, UeEstimate],
) -> tuple[list[tuple[UeProfile, float]], list[UeProfile]]:
    """Active UEs split into (usable rate, profile) pairs and zero-rate ones."""
    usable: list[tuple[UeProfile, float]] = []
    starved: list[UeProfile] = []
    for est in estimates.values():
        if not est.active or est.ue_id not in profiles:
            continue
        profile = profiles[est.ue_id]
        if est.eta_mbps_per_prb is None:
            continue  # bootstrap: no estimate yet
        if est.eta_mbps_per_prb <= 0:
            starved.append(profile)
        else:
            usable.append((profile, est.eta_mbps_per_prb))
    usable.sort(key=lambda pe: pe[0].ue_id)
    starved.sort(key=lambda p: p.ue_id)
    return usable, starved


def solve_soft(
    profiles: Mapping[int, UeProfile],
    estimates: Mapping[int, UeEstimate],
    total_prbs: int,
) -> PolicySolution:
    """Integer allocation minimizing the summed SLA violation.

    Grants one PRB at a time to the UE with the largest marginal gain
    min(eta, residual shortfall); ties break by descending eta, then
    descending SLA, then ascending ue_id.  The gain sequence per UE is
    non-increasing, so the greedy is exactly optimal for the integer program.
    """
    usable, starved = _contenders(profiles, estimates)
    grants = {p.ue_id: 0 for p, _ in usable}
    eta = {p.ue_id: e for p, e in usable}
    sla = {p.ue_id: p.gbr_mbps for p, _ in usable}

    def gain(u: int) -> float:
        residual = sla[u] - grants[u] * eta[u]
        if residual <= _GAIN_EPS:
            return 0.0
        return min(eta[u], residual)

    budget = total_prbs
    while budget > 0 and usable:
        gains = {u: gain(u) for u in grants}
        gmax = max(gains.values())
        if gmax <= 0.0:
            break
        cutoff = gmax - max(gmax * _TIE_REL, 1e-15)
        tied = [u for u in grants if gains[u] >= cutoff]
        winner = max(tied, key=lambda u: (eta[u], sla[u], -u))
        grants[winner] += 1
        budget -= 1

    entries = [
        UeAllocation(
            ue_id=u, prbs=grants[u],
            expected_violation_mbps=violation(sla[u], grants[u] * eta[u]),
            selected=True,
        )
        for u in sorted(grants)
    ]
    entries += [
        UeAllocation(ue_id=p.ue_id, prbs=0,
                     expected_violation_mbps=p.gbr_mbps, selected=True)
        for p in starved
    ]
    entries.sort(key=lambda e: e.ue_id)
    return PolicySolution(entries=tuple(entries))


def solve_strict(
    profiles: Mapping[int, UeProfile],
    estimates: Mapping[int, UeEstimate],
    total_prbs: int,
) -> PolicySolution:
    """Maximum-weight subset of UEs served at full GBR (0/1 knapsack).

    Exact dynamic program over capacity; among maximum-weight solutions the
    tie-break prefers minimum total PRB cost, then the lexicographically
    smallest selected-id set.  Selected UEs get exactly their demand; the
    leftover splits equally (remainder to lowest ids) among the active
    unselected UEs.
    """
    usable, starved = _contenders(profiles, estimates)
    costs = {p.ue_id: required_prbs(p.gbr_mbps, e) for p, e in usable}
    eta = {p.ue_id: e for p, e in usable}

    # dp[c]: best (summed weight, summed cost, selected ids) within capacity c.
    empty = (0.0, 0, ())
    dp: list[tuple[float, int, tuple[int, ...]]] = [empty] * (total_prbs + 1)

    def better(a, b) -> bool:
        if a[0] != b[0]:
            return a[0] > b[0]
        if a[1] != b[1]:
            return a[1] < b[1]
        return a[2] < b[2]

    for p, _ in usable:
        c_u = costs[p.ue_id]
        if c_u > total_prbs:
            continue
        for cap in range(total_prbs, c_u - 1, -1):
            base = dp[cap - c_u]
            cand = (base[0] + p.weight, base[1] + c_u, base[2] + (p.ue_id,))
            if better(cand, dp[cap]):
                dp[cap] = cand

    selected = set(dp[total_prbs][2])
    leftover = total_prbs - dp[total_prbs][1]
    others = sorted(p.ue_id for p, _ in usable if p.ue_id not in selected)
    extra_share = {}
    if others:
        base, extra = divmod(leftover, len(others))
        extra_share = {u: base + (1 if i < extra else 0) for i, u in enumerate(others)}

    entries = []
    for p, e in usable:
        if p.ue_id in selected:
            prbs = costs[p.ue_id]
            entries.append(UeAllocation(
                ue_id=p.ue_id, prbs=prbs,
                expected_violation_mbps=violation(p.gbr_mbps, prbs * e),
                selected=True,
            ))
        else:
            prbs = extra_share.get(p.ue_id, 0)
            entries.append(UeAllocation(
                ue_id=p.ue_id, prbs=prbs,
                expected_violation_mbps=violation(p.gbr_mbps, prbs * eta[p.ue_id]),
                selected=False,
            ))
    entries += [
        UeAllocation(ue_id=p.ue_id, prbs=0,
                     expected_violation_mbps=p.gbr_mbps, selected=False)
        for p in starved
    ]
    entries.sort(key=lambda entry: entry.ue_id)
    return PolicySolution(entries=tuple(entries))


@dataclass
class DecisionRecord:
    """One control cycle's structured log entry."""

    time_s: float
    policy: str
    contention: bool
    allocations: dict[int, int]
    violations: dict[int, float]
    issued: bool
    last_seq: int
    held: bool = False


class SlaXapp:
    """The control micro-service: one instance per governed cell."""

    def __init__(
        self,
        handle: XappHandle,
        profiles: Mapping[int, UeProfile],
        cell: CellConfig,
        policy: PolicyKind,
    ):
        self.handle = handle
        self.profiles = dict(profiles)
        self.cell = cell
        self.policy = policy
        self.gnb_id: int | None = None
        self.subscription_id: int | None = None
        self.estimates: dict[int, UeEstimate] = {}
        self.decisions: list[DecisionRecord] = []
        self.commands_issued = 0
        self.indications_seen = 0
        self.issue_times: dict[int, float] = {}  # token -> wall time
        self._last_allocation: dict[int, int] | None = {}
        self._governed: set[int] = set()
        self._last_rx_s: float | None = None
        self._stale_logged = False

    def start(self, gnb_id: int | None = None) -> None:
        if gnb_id is None:
            nodes = self.handle.get_gnb_id_list()
            if not nodes:
                raise RuntimeError("no connected nodes to govern")
            gnb_id = nodes[0]
        self.gnb_id = gnb_id
        self.subscription_id = self.handle.e2ap_subscribe(gnb_id, self.cell.report_period_ms)
        log.info("governing gnb %d with policy %s (subscription %d)",
                 gnb_id, self.policy.value, self.subscription_id)

    # --- one control cycle -----------------------------------------------------

    def control_step(self, now_s: float, wall_s: float | None = None) -> DecisionRecord | None:
        indications: list[Indication] = []
        while (msg := self.handle.get_queued_rx_msg()) is not None:
            if isinstance(msg, Indication):
                indications.append(msg)
            elif isinstance(msg, ControlOutcome):
                self._handle_ack(msg)
        if not indications:
            period_s = self.cell.report_period_ms / 1000
            if (self._last_rx_s is not None
                    and now_s - self._last_rx_s > STALE_PERIODS * period_s):
                if not self._stale_logged:
                    log.warning("telemetry stale for more than %d periods; holding", STALE_PERIODS)
                    self._stale_logged = True
                record = DecisionRecord(
                    time_s=now_s, policy=self.policy.value, contention=False,
                    allocations={}, violations={}, issued=False,
                    last_seq=self.indications_seen, held=True,
                )
                self.decisions.append(record)
                return record
            return None
        self._last_rx_s = now_s
        self._stale_logged = False
        self.indications_seen += len(indications)
        for ind in indications:
            self.estimates = update_estimates(ind.report, self.cell, self.profiles, self.estimates)
        last_seq = indications[-1].seq

        contention = detect_contention(self.estimates, self.profiles, self.cell.total_prbs)
        if self.policy is PolicyKind.BASELINE:
            desired: dict[int, int] = {}
            violations = self._passive_violations()
        elif not contention:
            desired = {}
            for est in self.estimates.values():
                if not est.active or est.demand_prbs is None:
                    continue
                desired[est.ue_id] = est.demand_prbs
            violations = {u: 0.0 for u in desired}
        else:
            solver = solve_soft if self.policy is PolicyKind.SOFT else solve_strict
            solution = solver(self.profiles, self.estimates, self.cell.total_prbs)
            desired = {e.ue_id: e.prbs for e in solution.entries}
            violations = {e.ue_id: e.expected_violation_mbps for e in solution.entries}

        issued = self._issue_if_changed(desired, wall_s if wall_s is not None else now_s)
        record = DecisionRecord(
            time_s=now_s, policy=self.policy.value, contention=contention,
            allocations=dict(desired), violations=violations,
            issued=issued, last_seq=last_seq,
        )
        self.decisions.append(record)
        log.debug("cycle t=%.3f contention=%s allocations=%s issued=%s",
                  now_s, contention, desired, issued)
        return record

    def _passive_violations(self) -> dict[int, float]:
        out = {}
        for est in self.estimates.values():
            if est.active and est.ue_id in self.profiles and est.eta_mbps_per_prb:
                out[est.ue_id] = 0.0
        return out

    def _handle_ack(self, outcome: ControlOutcome) -> None:
        if not outcome.ok:
            log.warning("control token %d failed (cause %d, timed_out=%s); will re-issue",
                        outcome.token, outcome.cause, outcome.timed_out)
            self._last_allocation = None  # force a re-issue next cycle

    def _issue_if_changed(self, desired: dict[int, int], wall_s: float) -> bool:
        if desired == self._last_allocation:
            return False
        releases = self._governed - set(desired)
        entries = [SpsEntry(ue_id=u, fixed_prbs=p) for u, p in sorted(desired.items())]
        entries += [SpsEntry(ue_id=u, fixed_prbs=None) for u in sorted(releases)]
        if not entries:
            self._last_allocation = dict(desired)
            return False
        token = self.handle.e2ap_control_request(self.gnb_id, SpsCommand(entries=tuple(entries)))
        self.issue_times[token] = wall_s
        self.commands_issued += 1
        self._last_allocation = dict(desired)
        self._governed = set(desired)
        return True
