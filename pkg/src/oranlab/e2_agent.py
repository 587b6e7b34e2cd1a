"""gNB-side E2 endpoint, split into two halves joined by a datagram boundary.

The termination half owns the session with the controller (setup with
exponential backoff, subscriptions, control forwarding) and speaks frames
over a reliable ordered byte stream.  The service-model half sits next to the
scheduler and only ever exchanges datagrams with the termination:

* 0x01 SM_UPLINK: an encoded KPM report heading toward the controller,
* 0x02 SM_DOWNLINK: an encoded SPS control heading toward the scheduler,
* 0x03 ACK_STATUS: one status byte (0 ok, 1 rejected) answering a downlink.

The boundary can be a fused in-process queue pair (deterministic tests) or
real UDP sockets; both halves behave identically either way, and the
termination can run as a standalone process (``python -m oranlab.e2_agent``).
"""

from __future__ import annotations

import argparse
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import e2_codec as codec
from .e2_codec import Cause, FrameReader, MsgType, SpsCommand, Tag, frame
from .mac_sim import MacSim
from .transport import FusedBoundary, TcpStream, TransportClosedError, UdpBoundary

log = logging.getLogger(__name__)

DIR_SM_UPLINK = 0x01
DIR_SM_DOWNLINK = 0x02
DIR_ACK_STATUS = 0x03

MIN_REPORT_PERIOD_MS = 10  # near-real-time floor

SETUP_BACKOFF_BASE_S = 0.5
SETUP_BACKOFF_CAP_S = 8.0


class BoundaryError(ValueError):
    pass


def encode_boundary(direction: int, payload: bytes) -> bytes:
    if direction in (DIR_SM_UPLINK, DIR_SM_DOWNLINK) and not payload:
        raise BoundaryError("service-model boundary message needs a payload")
    if direction == DIR_ACK_STATUS and len(payload) != 1:
        raise BoundaryError("ack status must be exactly one byte")
    return bytes([direction]) + payload


def decode_boundary(data: bytes) -> tuple[int, bytes]:
    if not data:
        raise BoundaryError("empty boundary datagram")
    direction, payload = data[0], data[1:]
    if direction not in (DIR_SM_UPLINK, DIR_SM_DOWNLINK, DIR_ACK_STATUS):
        raise BoundaryError(f"unknown boundary direction 0x{direction:02X}")
    if direction in (DIR_SM_UPLINK, DIR_SM_DOWNLINK) and not payload:
        raise BoundaryError("service-model boundary message needs a payload")
    if direction == DIR_ACK_STATUS and len(payload) != 1:
        raise BoundaryError("ack status must be exactly one byte")
    return direction, payload


@dataclass(frozen=True)
class AgentConfig:
    gnb_id: int
    ran_function_id: int = codec.DEFAULT_RAN_FUNCTION_ID
    cell_report_period_ms: int = 100

    def __post_init__(self):
        if self.gnb_id <= 0:
            raise ValueError(f"gnb_id must be > 0, got {self.gnb_id}")


class SmTask:
    """Service-model half: applies controls to the scheduler, ships reports up."""

    def __init__(self, sim: MacSim, boundary):
        self._sim = sim
        self._boundary = boundary

    def pump(self) -> int:
        work = 0
        for dgram in self._boundary.poll():
            work += 1
            try:
                direction, payload = decode_boundary(dgram)
            except BoundaryError as exc:
                log.warning("dropping bad boundary datagram: %s", exc)
                continue
            if direction != DIR_SM_DOWNLINK:
                log.warning("unexpected boundary direction 0x%02X at SM task", direction)
                continue
            status = 1
            try:
                cmd = codec.decode_sm_payload(payload)
            except codec.CodecError as exc:
                log.warning("undecodable control payload: %s", exc)
            else:
                if isinstance(cmd, SpsCommand):
                    ack = self._sim.apply_sps_command(cmd)
                    status = 0 if ack.ok else 1
                    if not ack.ok:
                        log.warning("scheduler rejected control: %s", ack.reason)
            self._boundary.send(encode_boundary(DIR_ACK_STATUS, bytes([status])))
        for report in self._sim.pop_reports():
            self._boundary.send(encode_boundary(DIR_SM_UPLINK, codec.encode_sm_payload(report)))
            work += 1
        return work


@dataclass
class _Subscription:
    subscription_id: int
    period_ms: int
    decimation: int
    windows_seen: int = 0


@dataclass
class _PendingControl:
    txid: int
    deadline_s: float


class E2apTermination:
    """Termination half: session lifecycle, subscriptions, control forwarding.

    ``stream_factory`` is called on every (re)connection attempt and must
    return a stream endpoint or raise ``ConnectionError``.
    """

    def __init__(self, cfg: AgentConfig, stream_factory, boundary):
        self.cfg = cfg
        self._factory = stream_factory
        self._boundary = boundary
        self._stream = None
        self._reader = FrameReader()
        self.established = False
        self._next_attempt_s = 0.0
        self._backoff_s = SETUP_BACKOFF_BASE_S
        self._txid = 0
        self._next_sub_id = 1
        self._subs: dict[int, _Subscription] = {}
        self._pending: deque[_PendingControl] = deque()
        # diagnostics
        self.setup_attempts = 0
        self.setup_rejects = 0
        self.indications_emitted = 0
        self.control_timeouts = 0

    def _fresh_txid(self) -> int:
        t = self._txid
        self._txid = (self._txid + 1) & 0xFFFF
        return t

    def _send(self, f) -> None:
        if self._stream is None:
            return
        try:
            self._stream.send(codec.encode_frame(f))
        except TransportClosedError:
            self._on_stream_lost()

    def _on_stream_lost(self) -> None:
        if self._stream is not None:
            self._stream.close()
        self._stream = None
        self._reader = FrameReader()
        if self.established:
            log.warning("gnb %d: session lost, full re-setup", self.cfg.gnb_id)
        self.established = False
        self._subs.clear()
        self._pending.clear()

    def _schedule_retry(self, now: float) -> None:
        self._next_attempt_s = now + self._backoff_s
        self._backoff_s = min(SETUP_BACKOFF_CAP_S, self._backoff_s * 2)

    def _lose_stream(self, now: float) -> None:
        self._on_stream_lost()
        self._schedule_retry(now)

    def _ack_timeout_s(self) -> float:
        period = self.cfg.cell_report_period_ms
        if self._subs:
            period = max(s.period_ms for s in self._subs.values())
        return 2 * period / 1000

    def pump(self, now: float) -> int:
        work = 0
        if self._stream is not None and self._stream.closed:
            self._lose_stream(now)
        if self._stream is None:
            if now < self._next_attempt_s:
                return work
            self.setup_attempts += 1
            try:
                self._stream = self._factory()
            except ConnectionError as exc:
                log.info("gnb %d: connection attempt failed (%s)", self.cfg.gnb_id, exc)
                self._schedule_retry(now)
                return work
            # Defaulted function id is left off the wire.
            rfid = None if self.cfg.ran_function_id == codec.DEFAULT_RAN_FUNCTION_ID \
                else self.cfg.ran_function_id
            self._send(frame(MsgType.SETUP_REQ, self._fresh_txid(),
                             gnb_id=self.cfg.gnb_id, ran_function_id=rfid))
            work += 1
            if self._stream is None:  # the send itself failed
                self._schedule_retry(now)
                return work

        data = self._stream.drain()
        if data:
            self._reader.feed(data)
        try:
            for f in self._reader:
                work += 1
                self._handle_frame(f, now)
        except codec.CodecError as exc:
            log.warning("gnb %d: framing error from controller: %s", self.cfg.gnb_id, exc)
            self._send(frame(MsgType.ERROR, self._fresh_txid(), cause=Cause.MALFORMED))
            self._lose_stream(now)
            return work
        if self._stream is None or self._stream.closed:
            self._lose_stream(now)
            return work

        for dgram in self._boundary.poll():
            work += 1
            try:
                direction, payload = decode_boundary(dgram)
            except BoundaryError as exc:
                log.warning("dropping bad boundary datagram: %s", exc)
                continue
            if direction == DIR_SM_UPLINK:
                self._emit_indications(payload)
            elif direction == DIR_ACK_STATUS:
                if not self._pending:
                    log.warning("gnb %d: stray ack status", self.cfg.gnb_id)
                    continue
                pending = self._pending.popleft()
                cause = Cause.OK if payload[0] == 0 else Cause.REJECT
                self._send(frame(MsgType.CONTROL_ACK, pending.txid, cause=cause))

        while self._pending and self._pending[0].deadline_s <= now:
            pending = self._pending.popleft()
            self.control_timeouts += 1
            log.warning("gnb %d: control txid %d not acknowledged by the scheduler task",
                        self.cfg.gnb_id, pending.txid)
            self._send(frame(MsgType.ERROR, self._fresh_txid(), cause=Cause.REJECT))
            work += 1
        return work

    def _handle_frame(self, f, now: float) -> None:
        if f.msg_type == MsgType.SETUP_RESP:
            if f.uint(Tag.CAUSE) == Cause.OK:
                self.established = True
                self._backoff_s = SETUP_BACKOFF_BASE_S
                log.info("gnb %d: session established", self.cfg.gnb_id)
            else:
                self.setup_rejects += 1
                self._lose_stream(now)
        elif f.msg_type == MsgType.SUB_REQ:
            rfid = f.uint(Tag.RAN_FUNCTION_ID)
            period = f.uint(Tag.REPORT_PERIOD_MS)
            if rfid != self.cfg.ran_function_id:
                self._send(frame(MsgType.SUB_RESP, f.txid, subscription_id=0,
                                 cause=Cause.UNKNOWN_FUNCTION))
                return
            if period < MIN_REPORT_PERIOD_MS:
                self._send(frame(MsgType.SUB_RESP, f.txid, subscription_id=0,
                                 cause=Cause.REJECT))
                return
            sub_id = self._next_sub_id
            self._next_sub_id += 1
            decimation = max(1, period // self.cfg.cell_report_period_ms)
            self._subs[sub_id] = _Subscription(sub_id, period, decimation)
            self._send(frame(MsgType.SUB_RESP, f.txid, subscription_id=sub_id,
                             cause=Cause.OK))
        elif f.msg_type == MsgType.CONTROL_REQ:
            payload = f.get(Tag.SM_PAYLOAD)
            if f.uint(Tag.GNB_ID) != self.cfg.gnb_id:
                self._send(frame(MsgType.CONTROL_ACK, f.txid, cause=Cause.REJECT))
                return
            try:
                decoded = codec.decode_sm_payload(payload)
                if not isinstance(decoded, SpsCommand):
                    raise codec.InvalidValueError("control payload is not an SPS command")
            except codec.CodecError:
                self._send(frame(MsgType.CONTROL_ACK, f.txid, cause=Cause.MALFORMED))
                return
            self._boundary.send(encode_boundary(DIR_SM_DOWNLINK, payload))
            self._pending.append(_PendingControl(f.txid, now + self._ack_timeout_s()))
        elif f.msg_type == MsgType.ERROR:
            log.warning("gnb %d: controller reported error cause %s",
                        self.cfg.gnb_id, f.uint(Tag.CAUSE))
        else:
            log.warning("gnb %d: unexpected frame type 0x%02X", self.cfg.gnb_id, f.msg_type)

    def _emit_indications(self, report_bytes: bytes) -> None:
        for sub in self._subs.values():
            if sub.windows_seen % sub.decimation == 0:
                self._send(frame(
                    MsgType.INDICATION, self._fresh_txid(),
                    gnb_id=self.cfg.gnb_id, subscription_id=sub.subscription_id,
                    sm_payload=report_bytes,
                ))
                self.indications_emitted += 1
            sub.windows_seen += 1


class E2Agent:
    """Both halves plus their boundary, bundled for in-process deployments."""

    def __init__(self, sm: SmTask, termination: E2apTermination, endpoints=()):
        self.sm = sm
        self.termination = termination
        self._endpoints = endpoints

    @classmethod
    def fused(cls, cfg: AgentConfig, sim: MacSim, stream_factory) -> "E2Agent":
        agent_side, gnb_side = FusedBoundary.pair()
        sm = SmTask(sim, gnb_side)
        term = E2apTermination(cfg, stream_factory, agent_side)
        return cls(sm, term, (agent_side, gnb_side))

    @classmethod
    def over_udp(cls, cfg: AgentConfig, sim: MacSim, stream_factory) -> "E2Agent":
        agent_side, gnb_side = UdpBoundary.pair()
        sm = SmTask(sim, gnb_side)
        term = E2apTermination(cfg, stream_factory, agent_side)
        return cls(sm, term, (agent_side, gnb_side))

    def pump(self, now: float) -> int:
        return self.sm.pump() + self.termination.pump(now)

    def close(self) -> None:
        for ep in self._endpoints:
            ep.close()


def main(argv=None) -> int:
    """Run the termination half standalone over real TCP + UDP sockets."""
    parser = argparse.ArgumentParser(description="standalone E2 termination process")
    parser.add_argument("--gnb-id", type=int, required=True)
    parser.add_argument("--ric", required=True, help="controller endpoint host:port")
    parser.add_argument("--local-port", type=int, required=True, help="UDP port to bind")
    parser.add_argument("--peer-port", type=int, required=True, help="UDP port of the gNB task")
    parser.add_argument("--function-id", type=int, default=codec.DEFAULT_RAN_FUNCTION_ID)
    parser.add_argument("--period", type=int, default=100, help="cell report window in ms")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    host, port = args.ric.rsplit(":", 1)
    boundary = UdpBoundary(("127.0.0.1", args.local_port), ("127.0.0.1", args.peer_port))

    def factory():
        try:
            return TcpStream.connect(host, int(port))
        except OSError as exc:
            raise ConnectionError(str(exc)) from exc

    cfg = AgentConfig(gnb_id=args.gnb_id, ran_function_id=args.function_id,
                      cell_report_period_ms=args.period)
    term = E2apTermination(cfg, factory, boundary)
    stop = threading.Event()
    try:
        while not stop.is_set():
            term.pump(time.monotonic())
            time.sleep(0.0005)
    except KeyboardInterrupt:
        pass
    finally:
        boundary.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
