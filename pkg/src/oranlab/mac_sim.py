"""Deterministic slot-driven downlink MAC scheduler.

Each slot serves UEs with full-buffer traffic: UEs holding a fixed
(SPS-style) grant receive exactly that many PRBs first, then UEs without a
fixed grant share the remainder through proportional fairness.  When every
active UE holds a fixed grant, the surplus is left idle in ``cap`` leftover
mode (default, so served rates equal the controller's intent) or PF-shared
among the fixed UEs as extra capacity in ``pf`` mode.

There is no hidden randomness: all tie-breaks are specified, so identical
configurations produce identical slot outcome streams.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .domain import CellConfig
from .e2_codec import KpmRecord, KpmReport, SpsCommand

log = logging.getLogger(__name__)

PF_HORIZON_SLOTS = 100
EWMA_FLOOR_BPS = 1.0


@dataclass(frozen=True)
class ChannelModel:
    """Per-UE constant bits-per-PRB-per-slot, with optional step changes."""

    bits_per_prb_per_slot: Mapping[int, int]
    steps: tuple[tuple[int, int, int], ...] = ()  # (slot_index, ue_id, new_bits)

    def __post_init__(self):
        for ue, bits in self.bits_per_prb_per_slot.items():
            if bits <= 0:
                raise ValueError(f"bits_per_prb_per_slot must be > 0 for ue {ue}")
        slots = [s for s, _, _ in self.steps]
        if slots != sorted(slots):
            raise ValueError("channel steps must be sorted by slot_index")


@dataclass(frozen=True)
class TrafficSchedule:
    """Per-UE full-buffer on/off intervals in seconds."""

    intervals: Mapping[int, tuple[tuple[float, float], ...]]

    def __post_init__(self):
        for ue, spans in self.intervals.items():
            last_stop = -1.0
            for start, stop in spans:
                if stop <= start:
                    raise ValueError(f"ue {ue}: interval ({start}, {stop}) is empty")
                if start < last_stop:
                    raise ValueError(f"ue {ue}: intervals overlap or are unordered")
                last_stop = stop

    def active_at_us(self, ue_id: int, t_us: int) -> bool:
        for start, stop in self.intervals.get(ue_id, ()):
            if int(round(start * 1e6)) <= t_us < int(round(stop * 1e6)):
                return True
        return False


@dataclass(frozen=True)
class TtiOutcome:
    """Grants and delivered bits for one slot."""

    slot_index: int
    grants: dict[int, int]
    tbs_bits: dict[int, int]


@dataclass(frozen=True)
class SpsAck:
    ok: bool
    reason: str | None = None
    ignored_ue_ids: tuple[int, ...] = ()


@dataclass
class RunStats:
    windows: int = 0
    slots: int = 0
    behind_warnings: int = 0
    wall_seconds: float = 0.0


def pf_schedule(
    pool: Sequence[int],
    ewma_bps: Mapping[int, float],
    inst_rate_bps: Mapping[int, float],
    free_prbs: int,
    slot_index: int,
) -> dict[int, int]:
    """Grant all free PRBs to the UEs maximizing instantaneous-rate/average.

    Tied winners split the PRBs as evenly as integers allow; the rotating key
    ``(slot_index + ue_id) mod len(pool)`` decides who receives the remainder.
    """
    grants = {u: 0 for u in pool}
    if not pool or free_prbs <= 0:
        return grants
    metric = {
        u: inst_rate_bps[u] / max(ewma_bps.get(u, EWMA_FLOOR_BPS), EWMA_FLOOR_BPS)
        for u in pool
    }
    best = max(metric.values())
    winners = sorted(
        (u for u in pool if metric[u] == best),
        key=lambda u: ((slot_index + u) % len(pool), u),
    )
    base, extra = divmod(free_prbs, len(winners))
    for i, u in enumerate(winners):
        grants[u] = base + (1 if i < extra else 0)
    return grants


class MacSim:
    """Slot loop owning all scheduler state.

    External inputs (SPS commands) go through a thread-safe inbox drained at
    slot boundaries; window reports leave through a thread-safe outbox.
    """

    def __init__(
        self,
        cell: CellConfig,
        channel: ChannelModel,
        traffic: TrafficSchedule,
        ue_ids: Iterable[int] | None = None,
        leftover_mode: str = "cap",
    ):
        if leftover_mode not in ("cap", "pf"):
            raise ValueError(f"leftover_mode must be 'cap' or 'pf', got {leftover_mode!r}")
        self.cell = cell
        self.leftover_mode = leftover_mode
        self.ue_ids = tuple(sorted(ue_ids if ue_ids is not None
                                   else channel.bits_per_prb_per_slot.keys()))
        self._bits = dict(channel.bits_per_prb_per_slot)
        for u in self.ue_ids:
            if u not in self._bits:
                raise ValueError(f"ue {u} has no channel rate configured")
        self._steps = deque(channel.steps)
        self._traffic = traffic
        self._slot = 0
        self._fixed: dict[int, int] = {}
        self._pending: list[SpsCommand] = []
        self._lock = threading.Lock()
        self._ewma: dict[int, float] = {}
        self._prev_active: set[int] = set()
        self._win_prb_slots = {u: 0 for u in self.ue_ids}
        self._win_tbs_bits = {u: 0 for u in self.ue_ids}
        self._reports: deque[KpmReport] = deque()
        self.truncation_count = 0
        self.apply_log: list[tuple[int, float, dict[int, int]]] = []  # (slot, wall, fixed map)

    # --- control-plane side -------------------------------------------------

    def apply_sps_command(self, cmd: SpsCommand) -> SpsAck:
        """Validate and latch a command; it takes effect at the next slot boundary."""
        seen: set[int] = set()
        for e in cmd.entries:
            if e.ue_id in seen:
                return SpsAck(ok=False, reason=f"duplicate ue_id {e.ue_id} in command")
            seen.add(e.ue_id)
        known = [e for e in cmd.entries if e.ue_id in set(self.ue_ids)]
        ignored = tuple(e.ue_id for e in cmd.entries if e.ue_id not in set(self.ue_ids))
        with self._lock:
            merged = dict(self._fixed)
            for pending in self._pending:
                self._merge(merged, pending)
            self._merge(merged, SpsCommand(entries=tuple(known)))
            if sum(merged.values()) > self.cell.total_prbs:
                return SpsAck(
                    ok=False,
                    reason=f"fixed grants total {sum(merged.values())} exceeds "
                           f"capacity {self.cell.total_prbs}",
                    ignored_ue_ids=ignored,
                )
            self._pending.append(SpsCommand(entries=tuple(known)))
        if ignored:
            log.debug("sps command ignores unknown ue ids %s", ignored)
        return SpsAck(ok=True, ignored_ue_ids=ignored)

    @staticmethod
    def _merge(fixed: dict[int, int], cmd: SpsCommand) -> None:
        for e in cmd.entries:
            if e.fixed_prbs is None:
                fixed.pop(e.ue_id, None)
            else:
                fixed[e.ue_id] = e.fixed_prbs

    def fixed_grants(self) -> dict[int, int]:
        with self._lock:
            return dict(self._fixed)

    # --- slot loop ------------------------------------------------------------

    def step_tti(self) -> TtiOutcome:
        with self._lock:
            if self._pending:
                for cmd in self._pending:
                    self._merge(self._fixed, cmd)
                self._pending.clear()
                self.apply_log.append((self._slot, time.monotonic(), dict(self._fixed)))
            fixed = dict(self._fixed)

        while self._steps and self._steps[0][0] <= self._slot:
            _, ue, bits = self._steps.popleft()
            if bits <= 0:
                raise ValueError("channel step rate must be > 0")
            self._bits[ue] = bits

        t_us = self._slot * self.cell.slot_duration_us
        active = [u for u in self.ue_ids if self._traffic.active_at_us(u, t_us)]
        for u in active:
            if u not in self._prev_active:
                self._ewma[u] = EWMA_FLOOR_BPS  # newcomer boost

        grants = {u: 0 for u in self.ue_ids}
        budget = self.cell.total_prbs
        truncated = False
        fixed_active = [u for u in active if u in fixed]
        for u in sorted(fixed_active):
            g = min(fixed[u], budget)
            if g < fixed[u]:
                truncated = True
            grants[u] = g
            budget -= g
        if truncated:
            self.truncation_count += 1
            log.warning("slot %d: fixed grants exceed capacity, truncated", self._slot)

        slot_s = self.cell.slot_duration_s
        inst = {u: self._bits[u] / slot_s for u in active}
        free_pool = [u for u in active if u not in fixed]
        if free_pool:
            for u, g in pf_schedule(free_pool, self._ewma, inst, budget, self._slot).items():
                grants[u] += g
        elif budget > 0 and fixed_active and self.leftover_mode == "pf":
            for u, g in pf_schedule(fixed_active, self._ewma, inst, budget, self._slot).items():
                grants[u] += g

        assert sum(grants.values()) <= self.cell.total_prbs
        tbs = {u: grants[u] * self._bits[u] if u in inst else 0 for u in self.ue_ids}

        n = PF_HORIZON_SLOTS
        for u in active:
            served_bps = tbs[u] / slot_s
            self._ewma[u] = max(
                EWMA_FLOOR_BPS, (1 - 1 / n) * self._ewma[u] + (1 / n) * served_bps
            )
        self._prev_active = set(active)

        for u in self.ue_ids:
            self._win_prb_slots[u] += grants[u]
            self._win_tbs_bits[u] += tbs[u]
        outcome = TtiOutcome(slot_index=self._slot, grants=grants, tbs_bits=tbs)
        self._slot += 1
        return outcome

    def collect_report(self) -> KpmReport:
        """Window totals for every configured UE; resets the accumulator."""
        records = tuple(
            KpmRecord(ue_id=u, prb_slots=self._win_prb_slots[u], tbs_bits=self._win_tbs_bits[u])
            for u in self.ue_ids
        )
        self._win_prb_slots = {u: 0 for u in self.ue_ids}
        self._win_tbs_bits = {u: 0 for u in self.ue_ids}
        return KpmReport(period_ms=self.cell.report_period_ms, records=records)

    def step_window(self) -> KpmReport:
        """Advance one full report window and queue its report on the outbox."""
        for _ in range(self.cell.slots_per_report):
            self.step_tti()
        report = self.collect_report()
        self._reports.append(report)
        return report

    def pop_reports(self) -> list[KpmReport]:
        out = []
        while self._reports:
            out.append(self._reports.popleft())
        return out

    @property
    def slot_index(self) -> int:
        return self._slot

    # --- drivers ----------------------------------------------------------------

    def run(
        self,
        duration_s: float,
        mode: str = "det",
        speed: float = 1.0,
        trace_path: str | None = None,
        stop: threading.Event | None = None,
        on_window: Callable[[KpmReport], None] | None = None,
    ) -> RunStats:
        """Drive the slot loop for ``duration_s`` of simulated time.

        ``det`` steps as fast as possible (callee-driven clock, bit-identical
        traces across runs); ``live`` paces one slot per slot_duration/speed of
        wall time and counts (never drops) windows when it falls behind by
        more than one report period.
        """
        if mode not in ("det", "live"):
            raise ValueError(f"mode must be 'det' or 'live', got {mode!r}")
        total_us = int(round(duration_s * 1e6))
        n_slots = total_us // self.cell.slot_duration_us
        spw = self.cell.slots_per_report
        stats = RunStats()
        trace = open(trace_path, "w", encoding="utf-8") if trace_path else None
        if trace:
            trace.write("time_s,ue_id,prb_slots,tbs_bits,throughput_mbps\n")

        def finish_window():
            report = self.collect_report()
            self._reports.append(report)
            stats.windows += 1
            if trace:
                t = (self._slot * self.cell.slot_duration_us) / 1e6
                for r in report.records:
                    thr = r.tbs_bits / (self.cell.report_period_ms * 1000)
                    trace.write(f"{t:.3f},{r.ue_id},{r.prb_slots},{r.tbs_bits},{thr:.6f}\n")
            if on_window:
                on_window(report)

        t0 = time.monotonic()
        slot_s = self.cell.slot_duration_s
        behind_flagged = False
        try:
            done = 0
            while done < n_slots and not (stop and stop.is_set()):
                if mode == "live":
                    now = time.monotonic()
                    target = min(n_slots, int((now - t0) * speed / slot_s))
                    if target <= done:
                        time.sleep(min(0.001, slot_s / speed))
                        continue
                    lag_s = (target - done) * slot_s
                    if lag_s > self.cell.report_period_ms / 1000:
                        if not behind_flagged:
                            stats.behind_warnings += 1
                            behind_flagged = True
                            log.warning("live loop behind wall clock by %.3f sim-s", lag_s)
                    else:
                        behind_flagged = False
                else:
                    target = n_slots
                while done < target:
                    self.step_tti()
                    done += 1
                    stats.slots += 1
                    if self._slot % spw == 0:
                        finish_window()
                    if mode == "live" and done % spw == 0:
                        break  # re-check pacing at window granularity
        finally:
            if trace:
                trace.close()
        stats.wall_seconds = time.monotonic() - t0
        return stats
