"""Experiment runner: load a scenario, close the loop, emit traces.

Deterministic mode drives the simulator, agent, controller, and xApps in a
fixed round-robin per report window on a single thread, producing
bit-reproducible traces.  Live mode runs each component on its own thread
with real TCP/UDP sockets and wall-clock pacing.

Outputs: a CSV trace with one row per (report window, UE), a JSON run
summary, and optional plot-ready columnar files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .domain import CellConfig, UeProfile, violation
from .e2_agent import AgentConfig, E2Agent
from .mac_sim import ChannelModel, MacSim, TrafficSchedule
from .ric import Ric, RicServer
from .sla_xapp import PolicyKind, SlaXapp
from .transport import MemoryStream, TcpStream
from .xapp_sdk import Indication, XappHandle

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("time_s", "ue_id", "throughput_mbps", "prbs_avg",
                 "violation_mbps", "policy", "contention")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ScenarioError(ValueError):
    """Configuration problem, annotated with the offending field path."""


@dataclass
class ScenarioConfig:
    cell: CellConfig
    profiles: dict[int, UeProfile]
    channel: ChannelModel
    traffic: TrafficSchedule
    policy: PolicyKind
    duration_s: float
    mode: str = "det"
    speed: float = 1.0
    gnb_id: int = 1
    leftover_mode: str = "cap"

    @property
    def n_windows(self) -> int:
        return int(round(self.duration_s * 1000)) // self.cell.report_period_ms


@dataclass
class RunSummary:
    schema: int
    policy: str
    mode: str
    duration_s: float
    windows: int
    per_ue: dict[int, dict]
    total_violation_mbps: float
    command_count: int
    contention_duration_s: float
    counters: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float):
                return round(x, 9)
            if isinstance(x, dict):
                return {str(k): clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean(self.__dict__), indent=2, sort_keys=True) + "\n"


# --- configuration loading -----------------------------------------------------


def _need(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise ScenarioError(f"{path}.{key}: missing required field")
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ScenarioError(f"{path}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _opt(obj: dict, key: str, kind, path: str, default):
    if key not in obj:
        return default
    return _need(obj, key, kind, path)


def parse_scenario(raw: dict, source: str = "scenario") -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    cell_raw = _need(raw, "cell", dict, source)
    try:
        cell = CellConfig(
            total_prbs=_need(cell_raw, "total_prbs", int, "cell"),
            slot_duration_us=_opt(cell_raw, "slot_duration_us", int, "cell", 500),
            report_period_ms=_opt(cell_raw, "report_period_ms", int, "cell", 100),
        )
    except ValueError as exc:
        raise ScenarioError(f"cell: {exc}") from exc
    leftover = _opt(cell_raw, "leftover_mode", str, "cell", "cap")
    if leftover not in ("cap", "pf"):
        raise ScenarioError("cell.leftover_mode: must be one of cap, pf")

    ues_raw = _need(raw, "ues", list, source)
    if not ues_raw:
        raise ScenarioError("ues: at least one UE required")
    profiles: dict[int, UeProfile] = {}
    bits: dict[int, int] = {}
    intervals: dict[int, tuple] = {}
    for i, ue_raw in enumerate(ues_raw):
        path = f"ues[{i}]"
        if not isinstance(ue_raw, dict):
            raise ScenarioError(f"{path}: expected object")
        ue_id = _need(ue_raw, "ue_id", int, path)
        if ue_id in profiles:
            raise ScenarioError(f"{path}.ue_id: duplicate ue_id {ue_id}")
        gbr = _need(ue_raw, "gbr_mbps", float, path)
        if gbr < 0:
            raise ScenarioError(f"{path}.gbr_mbps: must be >= 0, got {gbr}")
        weight = _opt(ue_raw, "weight", float, path, 1.0)
        if weight <= 0:
            raise ScenarioError(f"{path}.weight: must be > 0, got {weight}")
        b = _need(ue_raw, "bits_per_prb_per_slot", int, path)
        if b <= 0:
            raise ScenarioError(f"{path}.bits_per_prb_per_slot: must be > 0, got {b}")
        spans = []
        for j, span in enumerate(_opt(ue_raw, "traffic", list, path, [])):
            span_path = f"{path}.traffic[{j}]"
            if not isinstance(span, dict):
                raise ScenarioError(f"{span_path}: expected object")
            start = _need(span, "start_s", float, span_path)
            stop = _need(span, "stop_s", float, span_path)
            if stop <= start or start < 0:
                raise ScenarioError(f"{span_path}: needs 0 <= start_s < stop_s")
            spans.append((start, stop))
        profiles[ue_id] = UeProfile(ue_id=ue_id, gbr_mbps=gbr, weight=weight)
        bits[ue_id] = b
        intervals[ue_id] = tuple(spans)

    policy_raw = _need(raw, "policy", str, source)
    try:
        policy = PolicyKind(policy_raw)
    except ValueError:
        valid = ", ".join(p.value for p in PolicyKind)
        raise ScenarioError(f"policy: unknown policy {policy_raw!r}, must be one of {valid}") from None

    duration = _need(raw, "duration_s", float, source)
    if duration < 0:
        raise ScenarioError(f"duration_s: must be >= 0, got {duration}")
    for ue_id, spans in intervals.items():
        for start, stop in spans:
            if stop > duration:
                raise ScenarioError(
                    f"duration_s: {duration} does not cover traffic of ue {ue_id} "
                    f"ending at {stop}")

    mode = _opt(raw, "mode", str, source, "det")
    if mode not in ("det", "live"):
        raise ScenarioError("mode: must be one of det, live")
    speed = _opt(raw, "speed", float, source, 1.0)
    if speed <= 0:
        raise ScenarioError(f"speed: must be > 0, got {speed}")
    gnb_id = _opt(raw, "gnb_id", int, source, 1)
    if gnb_id <= 0:
        raise ScenarioError(f"gnb_id: must be > 0, got {gnb_id}")

    try:
        channel = ChannelModel(bits_per_prb_per_slot=bits)
        traffic = TrafficSchedule(intervals=intervals)
    except ValueError as exc:
        raise ScenarioError(f"ues: {exc}") from exc
    return ScenarioConfig(
        cell=cell, profiles=profiles, channel=channel, traffic=traffic,
        policy=policy, duration_s=duration, mode=mode, speed=speed,
        gnb_id=gnb_id, leftover_mode=leftover,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return parse_scenario(raw, source=path.name)


def apply_original_timeline(config: ScenarioConfig) -> ScenarioConfig:
    """Restore the staggered traffic starts 0/19/21 s over a 30 s run."""
    if sorted(config.profiles) != [1, 2, 3]:
        raise ScenarioError("ues: the original timeline needs exactly UEs 1, 2, 3")
    duration = 30.0
    config.duration_s = duration
    config.traffic = TrafficSchedule(intervals={
        3: ((0.0, duration),),
        2: ((19.0, duration),),
        1: ((21.0, duration),),
    })
    return config


# --- trace rows -----------------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    time_s: float
    ue_id: int
    throughput_mbps: float
    prbs_avg: float
    violation_mbps: float
    policy: str
    contention: bool


def _rows_from_indication(ind: Indication, config: ScenarioConfig,
                          contention: bool) -> list[TraceRow]:
    period_ms = config.cell.report_period_ms
    t = ind.seq * period_ms / 1000
    rows = []
    for rec in sorted(ind.report.records, key=lambda r: r.ue_id):
        thr = rec.tbs_bits / (period_ms * 1000)  # bits per us == Mbps
        rows.append(TraceRow(
            time_s=t, ue_id=rec.ue_id, throughput_mbps=thr,
            prbs_avg=rec.prb_slots / config.cell.slots_per_report,
            violation_mbps=violation(config.profiles[rec.ue_id].gbr_mbps, thr)
            if rec.ue_id in config.profiles else 0.0,
            policy=config.policy.value, contention=contention,
        ))
    return rows


def write_trace(rows: list[TraceRow], path: Path) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r.time_s:.3f},{r.ue_id},{r.throughput_mbps:.6f},"
                     f"{r.prbs_avg:.6f},{r.violation_mbps:.6f},"
                     f"{r.policy},{1 if r.contention else 0}\n")


def _contention_by_seq(xapp: SlaXapp, n_windows: int) -> dict[int, bool]:
    flags = {}
    prev = 0
    for rec in xapp.decisions:
        if rec.held:
            continue
        for seq in range(prev + 1, rec.last_seq + 1):
            flags[seq] = rec.contention
        prev = max(prev, rec.last_seq)
    for seq in range(1, n_windows + 1):
        flags.setdefault(seq, False)
    return flags


def _window_active(config: ScenarioConfig, ue_id: int, seq: int) -> bool:
    period_s = config.cell.report_period_ms / 1000
    w_start, w_end = (seq - 1) * period_s, seq * period_s
    for start, stop in config.traffic.intervals.get(ue_id, ()):
        if start < w_end and stop > w_start:
            return True
    return False


def summarize(rows: list[TraceRow], config: ScenarioConfig, xapp: SlaXapp,
              counters: dict) -> RunSummary:
    period_s = config.cell.report_period_ms / 1000
    per_ue: dict[int, dict] = {}
    for ue_id in sorted(config.profiles):
        ue_rows = [r for r in rows if r.ue_id == ue_id
                   and _window_active(config, ue_id, int(round(r.time_s / period_s)))]
        n = len(ue_rows)
        per_ue[ue_id] = {
            "active_windows": n,
            "mean_throughput_mbps": sum(r.throughput_mbps for r in ue_rows) / n if n else 0.0,
            "mean_violation_mbps": sum(r.violation_mbps for r in ue_rows) / n if n else 0.0,
        }
    total_violation = sum(v["mean_violation_mbps"] for v in per_ue.values())
    contention_windows = len({r.time_s for r in rows if r.contention})
    return RunSummary(
        schema=1, policy=config.policy.value, mode=config.mode,
        duration_s=config.duration_s, windows=config.n_windows,
        per_ue=per_ue, total_violation_mbps=total_violation,
        command_count=xapp.commands_issued,
        contention_duration_s=contention_windows * period_s,
        counters=counters,
    )


# --- deterministic driver --------------------------------------------------------


def _run_deterministic(config: ScenarioConfig) -> tuple[list[TraceRow], SlaXapp, dict]:
    sim = MacSim(config.cell, config.channel, config.traffic,
                 ue_ids=config.profiles.keys(), leftover_mode=config.leftover_mode)
    ric_end, agent_end = MemoryStream.pair()
    now_holder = [0.0]
    handed = [False]

    def factory():
        if handed[0]:
            raise ConnectionError("deterministic stream is single-shot")
        handed[0] = True
        return agent_end

    agent = E2Agent.fused(
        AgentConfig(gnb_id=config.gnb_id,
                    cell_report_period_ms=config.cell.report_period_ms),
        sim, factory)

    def pump_chain():
        agent.pump(now_holder[0])
        ric.pump(now_holder[0])

    ric = Ric(clock=lambda: now_holder[0], pump_driver=pump_chain,
              default_period_ms=config.cell.report_period_ms)
    ric.attach_agent_stream(ric_end)

    def pump_quiescent():
        for _ in range(16):
            work = agent.pump(now_holder[0]) + ric.pump(now_holder[0])
            if work == 0:
                return

    pump_quiescent()
    if not agent.termination.established:
        raise RuntimeError("agent session did not establish")

    xapp = SlaXapp(XappHandle(ric, "sla"), config.profiles, config.cell, config.policy)
    monitor = XappHandle(ric, "monitor")
    xapp.start(config.gnb_id)
    monitor.e2ap_subscribe(config.gnb_id, config.cell.report_period_ms)

    rows: list[TraceRow] = []
    pending_inds: list[Indication] = []
    period_s = config.cell.report_period_ms / 1000
    for w in range(config.n_windows):
        sim.step_window()
        now_holder[0] = (w + 1) * period_s
        pump_quiescent()
        xapp.control_step(now_holder[0])
        pump_quiescent()
        while (msg := monitor.get_queued_rx_msg()) is not None:
            if isinstance(msg, Indication):
                pending_inds.append(msg)

    flags = _contention_by_seq(xapp, config.n_windows)
    for ind in pending_inds:
        rows.extend(_rows_from_indication(ind, config, flags[ind.seq]))
    rows.sort(key=lambda r: (r.time_s, r.ue_id))
    counters = {
        "indications_emitted": agent.termination.indications_emitted,
        "indications_routed": ric.indications_routed,
        "xapp_indications": xapp.indications_seen,
        "monitor_indications": len(pending_inds),
        "queue_drops": xapp.handle.queue_dropped + monitor.queue_dropped,
        "sps_truncations": sim.truncation_count,
        "control_timeouts": agent.termination.control_timeouts,
    }
    agent.close()
    return rows, xapp, counters


# --- live driver ------------------------------------------------------------------


def _run_live(config: ScenarioConfig) -> tuple[list[TraceRow], SlaXapp, dict]:
    sim = MacSim(config.cell, config.channel, config.traffic,
                 ue_ids=config.profiles.keys(), leftover_mode=config.leftover_mode)
    ric = Ric(default_period_ms=config.cell.report_period_ms)
    server = RicServer(ric).start()
    host, port = server.address

    def factory():
        try:
            return TcpStream.connect(host, port)
        except OSError as exc:
            raise ConnectionError(str(exc)) from exc

    agent = E2Agent.over_udp(
        AgentConfig(gnb_id=config.gnb_id,
                    cell_report_period_ms=config.cell.report_period_ms),
        sim, factory)
    stop = threading.Event()

    def agent_loop():
        while not stop.is_set():
            agent.pump(time.monotonic())
            time.sleep(0.0005)

    agent_thread = threading.Thread(target=agent_loop, name="e2-agent", daemon=True)
    agent_thread.start()

    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and not agent.termination.established:
        time.sleep(0.002)
    if not agent.termination.established:
        stop.set()
        server.stop()
        raise RuntimeError("agent session did not establish")

    xapp = SlaXapp(XappHandle(ric, "sla"), config.profiles, config.cell, config.policy)
    monitor = XappHandle(ric, "monitor")
    xapp.start(config.gnb_id)
    monitor.e2ap_subscribe(config.gnb_id, config.cell.report_period_ms)

    t0 = time.monotonic()

    def xapp_loop():
        while not stop.is_set():
            now = time.monotonic()
            xapp.control_step(now - t0, wall_s=now)
            time.sleep(0.0005)

    xapp_thread = threading.Thread(target=xapp_loop, name="sla-xapp", daemon=True)
    xapp_thread.start()

    stats = sim.run(config.duration_s, mode="live", speed=config.speed, stop=stop)

    # Grace period: let the final windows flush through the loop.
    pending_inds: list[Indication] = []

    def drain_monitor():
        while (msg := monitor.get_queued_rx_msg()) is not None:
            if isinstance(msg, Indication):
                pending_inds.append(msg)

    flush_deadline = time.monotonic() + 2.0
    while time.monotonic() < flush_deadline:
        drain_monitor()
        if len(pending_inds) >= stats.windows:
            break
        time.sleep(0.01)
    drain_monitor()
    stop.set()
    agent_thread.join(timeout=2)
    xapp_thread.join(timeout=2)
    server.stop()
    agent.close()

    flags = _contention_by_seq(xapp, stats.windows)
    rows: list[TraceRow] = []
    for ind in pending_inds:
        rows.extend(_rows_from_indication(ind, config, flags.get(ind.seq, False)))
    rows.sort(key=lambda r: (r.time_s, r.ue_id))

    decision_times = [d.time_s for d in xapp.decisions if not d.held]
    issue_times = [xapp.issue_times[t] for t in sorted(xapp.issue_times)]
    apply_times = [wall for _, wall, _ in sim.apply_log]
    latencies = [a - i for i, a in zip(issue_times, apply_times)]
    counters = {
        "indications_emitted": agent.termination.indications_emitted,
        "indications_routed": ric.indications_routed,
        "xapp_indications": xapp.indications_seen,
        "monitor_indications": len(pending_inds),
        "queue_drops": xapp.handle.queue_dropped + monitor.queue_dropped,
        "sps_truncations": sim.truncation_count,
        "control_timeouts": agent.termination.control_timeouts,
        "behind_warnings": stats.behind_warnings,
        "wall_seconds": stats.wall_seconds,
        "decision_times_s": decision_times,
        "command_apply_latencies_s": latencies,
    }
    return rows, xapp, counters


def run_experiment(config: ScenarioConfig, out_dir: str | Path) -> RunSummary:
    """Execute the closed loop and write trace.csv plus summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.mode == "live":
        rows, xapp, counters = _run_live(config)
    else:
        rows, xapp, counters = _run_deterministic(config)
    write_trace(rows, out / "trace.csv")
    summary = summarize(rows, config, xapp, counters)
    (out / "summary.json").write_text(summary.to_json(), encoding="utf-8")
    return summary


# --- plot data --------------------------------------------------------------------


def emit_plotdata(trace_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Split a trace into per-UE time series plus a violation-bar table.

    Activity here is inferred from the trace itself (throughput > 0), which
    matches the schedule-based summary on every shipped scenario.
    """
    trace_path, out = Path(trace_path), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series: dict[int, list[tuple[float, float, float]]] = {}
    with trace_path.open(encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            ue = int(rec["ue_id"])
            series.setdefault(ue, []).append(
                (float(rec["time_s"]), float(rec["throughput_mbps"]),
                 float(rec["violation_mbps"])))
    written = []
    bars: list[tuple[str, float]] = []
    for ue in sorted(series):
        path = out / f"ue{ue}_series.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write("time_s,throughput_mbps,violation_mbps\n")
            for t, thr, viol in series[ue]:
                fh.write(f"{t:.3f},{thr:.6f},{viol:.6f}\n")
        written.append(path)
        active = [(thr, viol) for _, thr, viol in series[ue] if thr > 0]
        mean_viol = sum(v for _, v in active) / len(active) if active else 0.0
        bars.append((f"ue{ue}", mean_viol))
    bars.append(("total", sum(v for _, v in bars)))
    bars_path = out / "violation_bars.csv"
    with bars_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("label,violation_mbps\n")
        for label, value in bars:
            fh.write(f"{label},{value:.6f}\n")
    written.append(bars_path)
    return written


# --- CLI --------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="oranlab",
                                     description="closed-loop RAN control experiments")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario end to end")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--policy", choices=[p.value for p in PolicyKind])
    run_p.add_argument("--mode", choices=["det", "live"])
    run_p.add_argument("--speed", type=float)
    run_p.add_argument("--out", default="out")
    run_p.add_argument("--original-timeline", action="store_true",
                       help="traffic starts at 0/19/21 s over a 30 s run")

    plot_p = sub.add_parser("plotdata", help="emit plot-ready files from a trace")
    plot_p.add_argument("--trace", required=True)
    plot_p.add_argument("--out", default="out")

    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    if args.command == "run":
        try:
            config = load_scenario(args.config)
            if args.policy:
                config.policy = PolicyKind(args.policy)
            if args.mode:
                config.mode = args.mode
            if args.speed:
                if args.speed <= 0:
                    raise ScenarioError(f"speed: must be > 0, got {args.speed}")
                config.speed = args.speed
            if args.original_timeline:
                apply_original_timeline(config)
        except ScenarioError as exc:
            print(f"config error: {exc}")
            return EXIT_CONFIG
        try:
            summary = run_experiment(config, args.out)
        except Exception as exc:  # surfaced with a diagnostic, per the CLI contract
            log.exception("experiment failed")
            print(f"runtime failure: {exc}")
            return EXIT_RUNTIME
        print(f"policy={summary.policy} mode={summary.mode} windows={summary.windows}")
        for ue_id, stats in summary.per_ue.items():
            print(f"  ue{ue_id}: mean throughput {stats['mean_throughput_mbps']:.2f} Mbps, "
                  f"mean violation {stats['mean_violation_mbps']:.2f} Mbps")
        print(f"  total violation {summary.total_violation_mbps:.2f} Mbps, "
              f"{summary.command_count} control batches")
        print(f"wrote {Path(args.out) / 'trace.csv'} and {Path(args.out) / 'summary.json'}")
        return EXIT_OK

    if args.command == "plotdata":
        try:
            written = emit_plotdata(args.trace, args.out)
        except OSError as exc:
            print(f"runtime failure: {exc}")
            return EXIT_RUNTIME
        for path in written:
            print(f"wrote {path}")
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
