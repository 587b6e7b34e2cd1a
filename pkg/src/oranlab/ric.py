"""Near-real-time controller: session termination, node registry, routing.

The controller terminates agent sessions arriving over any reliable ordered
byte stream, keeps the registry of connected nodes, fan-outs indications to
every subscribed xApp queue, and correlates control acknowledgments back to
their issuers by transaction id.  xApps attach in-process through the SDK and
only ever poll their queues; no xApp code runs on a session's pump path.
"""

from __future__ import annotations

import argparse
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import e2_codec as codec
from .e2_codec import Cause, FrameReader, KpmReport, MsgType, SpsCommand, Tag, frame
from .transport import TcpListener, TransportClosedError

log = logging.getLogger(__name__)

XAPP_QUEUE_CAPACITY = 1024
SUBSCRIBE_WAIT_S = 2.0
SUBSCRIBE_MAX_PUMPS = 1000


class RicError(Exception):
    pass


class UnknownGnbError(RicError):
    pass


class SubscriptionRejectedError(RicError):
    def __init__(self, cause: int):
        super().__init__(f"subscription rejected with cause {cause}")
        self.cause = cause


@dataclass
class RnibEntry:
    gnb_id: int
    state: str  # "connected" | "lost"
    connected_at: float
    ran_function_ids: tuple[int, ...]


@dataclass(frozen=True)
class Indication:
    """A routed telemetry message."""

    gnb_id: int
    subscription_id: int
    report: KpmReport
    seq: int


@dataclass(frozen=True)
class ControlOutcome:
    """The acknowledgment (or synthesized failure) for a control request."""

    token: int
    gnb_id: int
    ok: bool
    cause: int
    timed_out: bool = False


class XappQueue:
    """Bounded FIFO; overflow drops the oldest message and counts it."""

    def __init__(self, capacity: int = XAPP_QUEUE_CAPACITY):
        self._q: deque = deque()
        self._capacity = capacity
        self._lock = threading.Lock()
        self.dropped = 0

    def push(self, msg) -> None:
        with self._lock:
            if len(self._q) >= self._capacity:
                self._q.popleft()
                self.dropped += 1
            self._q.append(msg)

    def pop(self):
        with self._lock:
            return self._q.popleft() if self._q else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._q)


@dataclass
class _Session:
    stream: object
    reader: FrameReader = field(default_factory=FrameReader)
    gnb_id: int | None = None


@dataclass
class _PendingSub:
    xapp_id: str
    gnb_id: int
    period_ms: int
    done: threading.Event = field(default_factory=threading.Event)
    subscription_id: int | None = None
    cause: int | None = None


@dataclass
class _PendingControl:
    xapp_id: str
    token: int
    gnb_id: int
    deadline_s: float


class Ric:
    """Registry, router, and session pump.

    ``clock`` supplies "now" for timeout bookkeeping (injected in
    deterministic runs); ``pump_driver``, when set, is called repeatedly while
    a subscription waits for its response instead of blocking on an event, so
    a single-threaded harness can resolve the exchange.
    """

    def __init__(self, clock=time.monotonic, pump_driver=None, default_period_ms: int = 100):
        self._clock = clock
        self._pump_driver = pump_driver
        self._default_period_ms = default_period_ms
        self._lock = threading.RLock()
        self._sessions: list[_Session] = []
        self._rnib: dict[int, RnibEntry] = {}
        self._session_by_gnb: dict[int, _Session] = {}
        self._queues: dict[str, XappQueue] = {}
        self._routes: dict[tuple[int, int], set[str]] = {}
        self._route_seq: dict[tuple[int, int], int] = {}
        self._sub_period: dict[int, int] = {}
        self._pending_subs: dict[int, _PendingSub] = {}
        self._pending_controls: dict[int, _PendingControl] = {}
        self._txid = 0
        self._next_token = 1
        # diagnostics
        self.indications_routed = 0
        self.unmatched_indications = 0
        self.agent_errors = 0

    # --- xApp-facing ----------------------------------------------------------

    def register_xapp(self, xapp_id: str) -> XappQueue:
        with self._lock:
            if xapp_id in self._queues:
                raise RicError(f"xapp id {xapp_id!r} already registered")
            q = XappQueue()
            self._queues[xapp_id] = q
            return q

    def get_gnb_id_list(self) -> list[int]:
        with self._lock:
            return sorted(g for g, e in self._rnib.items() if e.state == "connected")

    def subscribe(self, xapp_id: str, gnb_id: int, period_ms: int,
                  timeout_s: float = SUBSCRIBE_WAIT_S) -> int:
        with self._lock:
            session = self._connected_session(gnb_id)
            txid = self._fresh_txid()
            pending = _PendingSub(xapp_id=xapp_id, gnb_id=gnb_id, period_ms=period_ms)
            self._pending_subs[txid] = pending
            self._send(session, frame(
                MsgType.SUB_REQ, txid, gnb_id=gnb_id,
                ran_function_id=self._rnib[gnb_id].ran_function_ids[0],
                period_ms=period_ms,
            ))
        if self._pump_driver is not None:
            for _ in range(SUBSCRIBE_MAX_PUMPS):
                if pending.done.is_set():
                    break
                self._pump_driver()
            else:
                raise TimeoutError("subscription response never arrived")
        elif not pending.done.wait(timeout_s):
            with self._lock:
                self._pending_subs.pop(txid, None)
            raise TimeoutError("subscription response never arrived")
        if pending.cause != Cause.OK:
            raise SubscriptionRejectedError(pending.cause)
        return pending.subscription_id

    def route_control(self, xapp_id: str, gnb_id: int, payload: SpsCommand | bytes) -> int:
        """Send a control request; the eventual ack lands in the xApp's queue."""
        raw = codec.encode_sm_payload(payload) if isinstance(payload, SpsCommand) else bytes(payload)
        codec.decode_sm_payload(raw)  # reject nonsense before it leaves
        with self._lock:
            session = self._connected_session(gnb_id)
            txid = self._fresh_txid()
            token = self._next_token
            self._next_token += 1
            period = self._sub_period.get(gnb_id, self._default_period_ms)
            self._pending_controls[txid] = _PendingControl(
                xapp_id=xapp_id, token=token, gnb_id=gnb_id,
                deadline_s=self._clock() + 2 * period / 1000,
            )
            self._send(session, frame(MsgType.CONTROL_REQ, txid, gnb_id=gnb_id, sm_payload=raw))
            return token

    # --- node-facing ------------------------------------------------------------

    def attach_agent_stream(self, stream) -> None:
        with self._lock:
            self._sessions.append(_Session(stream=stream))

    def pump(self, now: float | None = None) -> int:
        now = self._clock() if now is None else now
        work = 0
        with self._lock:
            for session in list(self._sessions):
                work += self._pump_session(session, now)
            self._expire_controls(now)
        return work

    # --- internals ---------------------------------------------------------------

    def _connected_session(self, gnb_id: int) -> _Session:
        entry = self._rnib.get(gnb_id)
        if entry is None or entry.state != "connected":
            raise UnknownGnbError(f"gnb {gnb_id} is not connected")
        return self._session_by_gnb[gnb_id]

    def _fresh_txid(self) -> int:
        t = self._txid
        self._txid = (self._txid + 1) & 0xFFFF
        return t

    def _send(self, session: _Session, f) -> None:
        try:
            session.stream.send(codec.encode_frame(f))
        except TransportClosedError:
            self._drop_session(session)

    def _pump_session(self, session: _Session, now: float) -> int:
        work = 0
        data = session.stream.drain()
        if data:
            session.reader.feed(data)
        try:
            for f in session.reader:
                work += 1
                self._handle_frame(session, f, now)
        except codec.CodecError as exc:
            log.warning("malformed frame from agent (gnb %s): %s", session.gnb_id, exc)
            self._send(session, frame(MsgType.ERROR, self._fresh_txid(), cause=Cause.MALFORMED))
            self._drop_session(session)
            return work
        if session.stream.closed:
            self._drop_session(session)
        return work

    def _handle_frame(self, session: _Session, f, now: float) -> None:
        if f.msg_type == MsgType.SETUP_REQ:
            gnb_id = f.uint(Tag.GNB_ID)
            rfid = f.uint(Tag.RAN_FUNCTION_ID)
            if rfid is None:
                rfid = codec.DEFAULT_RAN_FUNCTION_ID
            old = self._session_by_gnb.get(gnb_id)
            if old is not None and old is not session:
                log.info("gnb %d: new setup supersedes the old session", gnb_id)
                self._drop_session(old, superseded=True)
            session.gnb_id = gnb_id
            self._session_by_gnb[gnb_id] = session
            self._rnib[gnb_id] = RnibEntry(
                gnb_id=gnb_id, state="connected", connected_at=now,
                ran_function_ids=(rfid,),
            )
            self._send(session, frame(MsgType.SETUP_RESP, f.txid, cause=Cause.OK))
            log.info("gnb %d connected", gnb_id)
        elif f.msg_type == MsgType.SUB_RESP:
            pending = self._pending_subs.pop(f.txid, None)
            if pending is None:
                log.warning("unexpected subscription response txid %d", f.txid)
                return
            pending.cause = f.uint(Tag.CAUSE)
            pending.subscription_id = f.uint(Tag.SUBSCRIPTION_ID)
            if pending.cause == Cause.OK:
                key = (pending.gnb_id, pending.subscription_id)
                self._routes.setdefault(key, set()).add(pending.xapp_id)
                self._route_seq.setdefault(key, 0)
                self._sub_period[pending.gnb_id] = pending.period_ms
            pending.done.set()
        elif f.msg_type == MsgType.INDICATION:
            gnb_id = f.uint(Tag.GNB_ID)
            sub_id = f.uint(Tag.SUBSCRIPTION_ID)
            key = (gnb_id, sub_id)
            xapps = self._routes.get(key)
            if not xapps:
                self.unmatched_indications += 1
                return
            report = codec.decode_sm_payload(f.get(Tag.SM_PAYLOAD))
            if not isinstance(report, KpmReport):
                self.unmatched_indications += 1
                return
            self._route_seq[key] += 1
            msg = Indication(gnb_id=gnb_id, subscription_id=sub_id,
                             report=report, seq=self._route_seq[key])
            for xapp_id in xapps:
                self._queues[xapp_id].push(msg)
                self.indications_routed += 1
        elif f.msg_type == MsgType.CONTROL_ACK:
            pending = self._pending_controls.pop(f.txid, None)
            if pending is None:
                log.warning("unmatched control ack txid %d", f.txid)
                return
            cause = f.uint(Tag.CAUSE)
            self._queues[pending.xapp_id].push(ControlOutcome(
                token=pending.token, gnb_id=pending.gnb_id,
                ok=cause == Cause.OK, cause=cause,
            ))
        elif f.msg_type == MsgType.ERROR:
            self.agent_errors += 1
            log.warning("agent (gnb %s) reported error cause %s",
                        session.gnb_id, f.uint(Tag.CAUSE))
        else:
            log.warning("unexpected frame type 0x%02X from agent", f.msg_type)

    def _expire_controls(self, now: float) -> None:
        expired = [txid for txid, p in self._pending_controls.items() if p.deadline_s <= now]
        for txid in expired:
            p = self._pending_controls.pop(txid)
            log.warning("control token %d to gnb %d timed out", p.token, p.gnb_id)
            self._queues[p.xapp_id].push(ControlOutcome(
                token=p.token, gnb_id=p.gnb_id, ok=False,
                cause=Cause.REJECT, timed_out=True,
            ))

    def _drop_session(self, session: _Session, superseded: bool = False) -> None:
        try:
            session.stream.close()
        except Exception:
            pass
        if session in self._sessions:
            self._sessions.remove(session)
        gnb_id = session.gnb_id
        if gnb_id is None:
            return
        if self._session_by_gnb.get(gnb_id) is session:
            del self._session_by_gnb[gnb_id]
            if not superseded and gnb_id in self._rnib:
                self._rnib[gnb_id].state = "lost"
                log.info("gnb %d lost", gnb_id)
        # In-flight controls toward this session fail loudly, never silently.
        for txid in [t for t, p in self._pending_controls.items() if p.gnb_id == gnb_id]:
            p = self._pending_controls.pop(txid)
            self._queues[p.xapp_id].push(ControlOutcome(
                token=p.token, gnb_id=p.gnb_id, ok=False,
                cause=Cause.REJECT, timed_out=False,
            ))
        if not superseded:
            for key in [k for k in self._routes if k[0] == gnb_id]:
                del self._routes[key]


class RicServer:
    """TCP front end for a :class:`Ric`: accept sessions, pump continuously."""

    def __init__(self, ric: Ric, host: str = "127.0.0.1", port: int = 0):
        self.ric = ric
        self._listener = TcpListener(host, port)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="ric-server", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.address

    def start(self) -> "RicServer":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            stream = self._listener.accept()
            if stream is not None:
                self.ric.attach_agent_stream(stream)
            self.ric.pump()
            time.sleep(0.0005)

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        self._listener.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="standalone near-RT controller")
    parser.add_argument("--listen", default="127.0.0.1:36421", help="host:port to listen on")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    host, port = args.listen.rsplit(":", 1)
    server = RicServer(Ric(), host, int(port)).start()
    log.info("listening on %s:%d", *server.address)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
