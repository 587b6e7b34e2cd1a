"""Bit-exact codecs for the control-plane frames and service-model payloads.

Frame layout: a 4-byte big-endian length L (counting everything after the
length field), then 1 byte message type, 2 bytes big-endian transaction id,
then TLVs in ascending-tag order.  Each TLV is 1 byte tag, 2 bytes big-endian
length, value.  All integers are big-endian and fixed-width.

Service-model payload layout:

* KPM report (0x01): period_ms u32 | num_ues u16 | records of
  (ue_id u16, prb_slots u32, tbs_bits u64).
* SPS control (0x02): num u16 | entries of (ue_id u16, fixed_prbs u32),
  where 0xFFFFFFFF means "release back to dynamic scheduling".

These byte formats are the wire contract; golden vectors live under
``fixtures/`` and must match bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum


class MsgType(IntEnum):
    SETUP_REQ = 0x01
    SETUP_RESP = 0x02
    SUB_REQ = 0x03
    SUB_RESP = 0x04
    INDICATION = 0x05
    CONTROL_REQ = 0x06
    CONTROL_ACK = 0x07
    ERROR = 0x7F


class Tag(IntEnum):
    GNB_ID = 0x01            # u32
    RAN_FUNCTION_ID = 0x02   # u16, default 1 when absent
    REPORT_PERIOD_MS = 0x03  # u32
    SM_PAYLOAD = 0x04        # opaque bytes
    CAUSE = 0x05             # u8
    SUBSCRIPTION_ID = 0x06   # u32


class Cause(IntEnum):
    OK = 0
    REJECT = 1
    UNKNOWN_FUNCTION = 2
    MALFORMED = 3


SM_KPM_REPORT = 0x01
SM_SPS_CONTROL = 0x02
SPS_RELEASE = 0xFFFFFFFF

DEFAULT_RAN_FUNCTION_ID = 1

#: Fixed value widths for the integer-valued tags (SM_PAYLOAD is opaque).
_TAG_WIDTH = {
    Tag.GNB_ID: 4,
    Tag.RAN_FUNCTION_ID: 2,
    Tag.REPORT_PERIOD_MS: 4,
    Tag.CAUSE: 1,
    Tag.SUBSCRIPTION_ID: 4,
}

#: TLVs that must appear exactly once per message type.  RAN_FUNCTION_ID is
#: optional on SETUP_REQ (absent means the default function id 1).
MANDATORY_TLVS = {
    MsgType.SETUP_REQ: (Tag.GNB_ID,),
    MsgType.SETUP_RESP: (Tag.CAUSE,),
    MsgType.SUB_REQ: (Tag.GNB_ID, Tag.RAN_FUNCTION_ID, Tag.REPORT_PERIOD_MS),
    MsgType.SUB_RESP: (Tag.SUBSCRIPTION_ID, Tag.CAUSE),
    MsgType.INDICATION: (Tag.GNB_ID, Tag.SUBSCRIPTION_ID, Tag.SM_PAYLOAD),
    MsgType.CONTROL_REQ: (Tag.GNB_ID, Tag.SM_PAYLOAD),
    MsgType.CONTROL_ACK: (Tag.CAUSE,),
    MsgType.ERROR: (Tag.CAUSE,),
}

MAX_FRAME_BODY = 1 << 20


class CodecError(Exception):
    """Base class for every encode/decode failure."""


class TruncatedFrameError(CodecError):
    pass


class TrailingBytesError(CodecError):
    pass


class UnknownTypeError(CodecError):
    pass


class TlvOverrunError(CodecError):
    pass


class MissingTlvError(CodecError):
    pass


class DuplicateTlvError(CodecError):
    pass


class InvalidValueError(CodecError):
    pass


@dataclass(frozen=True)
class E2Frame:
    """A decoded control-plane frame: type, transaction id, ordered TLVs."""

    msg_type: int
    txid: int
    fields: tuple[tuple[int, bytes], ...] = ()

    def get(self, tag: int) -> bytes | None:
        for t, v in self.fields:
            if t == tag:
                return v
        return None

    def uint(self, tag: int) -> int | None:
        v = self.get(tag)
        return None if v is None else int.from_bytes(v, "big")


def _uint_bytes(value: int, width: int, what: str) -> bytes:
    if not 0 <= value < (1 << (8 * width)):
        raise InvalidValueError(f"{what} {value} does not fit in {width} bytes")
    return value.to_bytes(width, "big")


def frame(
    msg_type: int,
    txid: int,
    *,
    gnb_id: int | None = None,
    ran_function_id: int | None = None,
    period_ms: int | None = None,
    sm_payload: bytes | None = None,
    cause: int | None = None,
    subscription_id: int | None = None,
    extra: tuple[tuple[int, bytes], ...] = (),
) -> E2Frame:
    """Assemble a frame with TLVs in canonical ascending-tag order."""
    fields: list[tuple[int, bytes]] = []
    if gnb_id is not None:
        fields.append((Tag.GNB_ID, _uint_bytes(gnb_id, 4, "gnb_id")))
    if ran_function_id is not None:
        fields.append((Tag.RAN_FUNCTION_ID, _uint_bytes(ran_function_id, 2, "ran_function_id")))
    if period_ms is not None:
        fields.append((Tag.REPORT_PERIOD_MS, _uint_bytes(period_ms, 4, "period_ms")))
    if sm_payload is not None:
        fields.append((Tag.SM_PAYLOAD, bytes(sm_payload)))
    if cause is not None:
        fields.append((Tag.CAUSE, _uint_bytes(cause, 1, "cause")))
    if subscription_id is not None:
        fields.append((Tag.SUBSCRIPTION_ID, _uint_bytes(subscription_id, 4, "subscription_id")))
    fields.extend(extra)
    fields.sort(key=lambda tv: tv[0])
    return E2Frame(msg_type=msg_type, txid=txid, fields=tuple(fields))


def _validate_fields(msg_type: int, fields: tuple[tuple[int, bytes], ...]) -> None:
    known = [t for t, _ in fields if t in _TAG_WIDTH or t == Tag.SM_PAYLOAD]
    seen: set[int] = set()
    for t in known:
        if t in seen:
            raise DuplicateTlvError(f"tag 0x{t:02X} appears more than once")
        seen.add(t)
    for t, v in fields:
        width = _TAG_WIDTH.get(t)
        if width is not None and len(v) != width:
            raise InvalidValueError(
                f"tag 0x{t:02X} value must be {width} bytes, got {len(v)}"
            )
    for tag in MANDATORY_TLVS[MsgType(msg_type)]:
        if tag not in seen:
            raise MissingTlvError(f"message type 0x{msg_type:02X} requires tag 0x{tag:02X}")


def encode_frame(f: E2Frame) -> bytes:
    """Serialize a frame; rejects missing mandatory TLVs by tag name."""
    try:
        MsgType(f.msg_type)
    except ValueError:
        raise UnknownTypeError(f"unknown message type 0x{f.msg_type:02X}") from None
    if not 0 <= f.txid <= 0xFFFF:
        raise InvalidValueError(f"txid {f.txid} does not fit in 16 bits")
    _validate_fields(f.msg_type, f.fields)
    body = bytearray()
    body.append(f.msg_type)
    body += f.txid.to_bytes(2, "big")
    for t, v in sorted(f.fields, key=lambda tv: tv[0]):
        if len(v) > 0xFFFF:
            raise InvalidValueError(f"tag 0x{t:02X} value too long ({len(v)} bytes)")
        body.append(t)
        body += len(v).to_bytes(2, "big")
        body += v
    if len(body) > MAX_FRAME_BODY:
        raise InvalidValueError(f"frame body too large ({len(body)} bytes)")
    return len(body).to_bytes(4, "big") + bytes(body)


def decode_frame(data: bytes) -> E2Frame:
    """Parse exactly one frame; trailing bytes beyond the length are an error."""
    if len(data) < 4:
        raise TruncatedFrameError(f"need 4 length bytes, got {len(data)}")
    length = int.from_bytes(data[:4], "big")
    if length > MAX_FRAME_BODY:
        raise TruncatedFrameError(f"declared body of {length} bytes exceeds limit")
    body = data[4:]
    if len(body) < length:
        raise TruncatedFrameError(f"body declares {length} bytes, got {len(body)}")
    if len(body) > length:
        raise TrailingBytesError(f"{len(body) - length} trailing bytes after frame")
    if length < 3:
        raise TruncatedFrameError("body too short for type and txid")
    msg_type = body[0]
    try:
        MsgType(msg_type)
    except ValueError:
        raise UnknownTypeError(f"unknown message type 0x{msg_type:02X}") from None
    txid = int.from_bytes(body[1:3], "big")
    fields: list[tuple[int, bytes]] = []
    pos = 3
    while pos < length:
        if length - pos < 3:
            raise TlvOverrunError("dangling bytes where a TLV header was expected")
        tag = body[pos]
        vlen = int.from_bytes(body[pos + 1 : pos + 3], "big")
        pos += 3
        if pos + vlen > length:
            raise TlvOverrunError(f"tag 0x{tag:02X} value overruns frame body")
        fields.append((tag, bytes(body[pos : pos + vlen])))
        pos += vlen
    f = E2Frame(msg_type=msg_type, txid=txid, fields=tuple(fields))
    _validate_fields(msg_type, f.fields)
    return f


class FrameReader:
    """Incremental frame splitter for a reliable ordered byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def __iter__(self):
        return self

    def __next__(self) -> E2Frame:
        if len(self._buf) < 4:
            raise StopIteration
        length = int.from_bytes(self._buf[:4], "big")
        if length > MAX_FRAME_BODY:
            raise TruncatedFrameError(f"declared body of {length} bytes exceeds limit")
        if len(self._buf) < 4 + length:
            raise StopIteration
        chunk = bytes(self._buf[: 4 + length])
        del self._buf[: 4 + length]
        return decode_frame(chunk)


# --- service-model payloads -------------------------------------------------


@dataclass(frozen=True)
class KpmRecord:
    ue_id: int
    prb_slots: int
    tbs_bits: int


@dataclass(frozen=True)
class KpmReport:
    """One report window's totals: PRB-slots and transport-block bits per UE."""

    period_ms: int
    records: tuple[KpmRecord, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class SpsEntry:
    """A fixed-allocation directive; ``fixed_prbs=None`` releases the UE."""

    ue_id: int
    fixed_prbs: int | None


@dataclass(frozen=True)
class SpsCommand:
    entries: tuple[SpsEntry, ...] = field(default_factory=tuple)


def encode_sm_payload(payload: KpmReport | SpsCommand) -> bytes:
    if isinstance(payload, KpmReport):
        out = bytearray(struct.pack(">BIH", SM_KPM_REPORT, payload.period_ms, len(payload.records)))
        for r in payload.records:
            out += struct.pack(">HIQ", r.ue_id, r.prb_slots, r.tbs_bits)
        return bytes(out)
    if isinstance(payload, SpsCommand):
        out = bytearray(struct.pack(">BH", SM_SPS_CONTROL, len(payload.entries)))
        for e in payload.entries:
            raw = SPS_RELEASE if e.fixed_prbs is None else e.fixed_prbs
            if not 0 <= raw <= 0xFFFFFFFF or (e.fixed_prbs is not None and raw == SPS_RELEASE):
                raise InvalidValueError(f"fixed_prbs {e.fixed_prbs} out of range")
            out += struct.pack(">HI", e.ue_id, raw)
        return bytes(out)
    raise InvalidValueError(f"not a service-model payload: {type(payload).__name__}")


def decode_sm_payload(data: bytes) -> KpmReport | SpsCommand:
    if len(data) < 1:
        raise TruncatedFrameError("empty service-model payload")
    sm_type = data[0]
    if sm_type == SM_KPM_REPORT:
        if len(data) < 7:
            raise TruncatedFrameError("KPM report header truncated")
        period_ms, count = struct.unpack(">IH", data[1:7])
        expected = 7 + count * 14
        if len(data) < expected:
            raise TruncatedFrameError(f"KPM report declares {count} records, body short")
        if len(data) > expected:
            raise TrailingBytesError("KPM report record count does not match body")
        records = tuple(
            KpmRecord(*struct.unpack(">HIQ", data[7 + i * 14 : 7 + (i + 1) * 14]))
            for i in range(count)
        )
        return KpmReport(period_ms=period_ms, records=records)
    if sm_type == SM_SPS_CONTROL:
        if len(data) < 3:
            raise TruncatedFrameError("SPS control header truncated")
        (count,) = struct.unpack(">H", data[1:3])
        expected = 3 + count * 6
        if len(data) < expected:
            raise TruncatedFrameError(f"SPS control declares {count} entries, body short")
        if len(data) > expected:
            raise TrailingBytesError("SPS control entry count does not match body")
        entries = []
        for i in range(count):
            ue_id, raw = struct.unpack(">HI", data[3 + i * 6 : 3 + (i + 1) * 6])
            entries.append(SpsEntry(ue_id=ue_id, fixed_prbs=None if raw == SPS_RELEASE else raw))
        return SpsCommand(entries=tuple(entries))
    raise UnknownTypeError(f"unknown service-model type 0x{sm_type:02X}")
