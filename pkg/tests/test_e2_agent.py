import subprocess
import sys
import time

import pytest

from oranlab import e2_codec as codec
from oranlab.domain import CellConfig
from oranlab.e2_agent import (
    AgentConfig,
    BoundaryError,
    DIR_ACK_STATUS,
    DIR_SM_DOWNLINK,
    DIR_SM_UPLINK,
    E2Agent,
    E2apTermination,
    SmTask,
    decode_boundary,
    encode_boundary,
)
from oranlab.e2_codec import (
    Cause,
    FrameReader,
    MsgType,
    SpsCommand,
    SpsEntry,
    Tag,
    frame,
)
from oranlab.mac_sim import ChannelModel, MacSim, TrafficSchedule
from oranlab.transport import FusedBoundary, MemoryStream, UdpBoundary

CELL = CellConfig(total_prbs=65)


def make_sim(ue_ids=(1, 2, 3)):
    return MacSim(
        CELL,
        ChannelModel(bits_per_prb_per_slot={u: 200 for u in ue_ids}),
        TrafficSchedule(intervals={u: ((0.0, 3600.0),) for u in ue_ids}),
        ue_ids=ue_ids,
    )


class ManualRic:
    """Test-side controller endpoint over one memory stream."""

    def __init__(self):
        self.end, self.agent_end = MemoryStream.pair()
        self.reader = FrameReader()
        self.raw = bytearray()
        self.frames = []
        self.txid = 0

    def factory(self):
        return self.agent_end

    def recv(self):
        data = self.end.drain()
        self.raw += data
        self.reader.feed(data)
        new = list(self.reader)
        self.frames.extend(new)
        return new

    def send(self, f):
        self.end.send(codec.encode_frame(f))

    def fresh_txid(self):
        self.txid += 1
        return self.txid


def established_agent(sim=None, boundary="fused"):
    ric = ManualRic()
    sim = sim or make_sim()
    cfg = AgentConfig(gnb_id=1)
    agent = (E2Agent.fused if boundary == "fused" else E2Agent.over_udp)(cfg, sim, ric.factory)
    agent.pump(0.0)
    (setup,) = ric.recv()
    assert setup.msg_type == MsgType.SETUP_REQ
    ric.send(frame(MsgType.SETUP_RESP, setup.txid, cause=Cause.OK))
    agent.pump(0.0)
    assert agent.termination.established
    return ric, agent, sim


def subscribe(ric, agent, period=100, now=0.0):
    txid = ric.fresh_txid()
    ric.send(frame(MsgType.SUB_REQ, txid, gnb_id=1, ran_function_id=1, period_ms=period))
    agent.pump(now)
    resp = [f for f in ric.recv() if f.msg_type == MsgType.SUB_RESP and f.txid == txid]
    return resp[0]


class TestBoundaryMsg:
    def test_round_trip(self):
        for direction, payload in ((DIR_SM_UPLINK, b"\x01\x02"),
                                   (DIR_SM_DOWNLINK, b"\x02"),
                                   (DIR_ACK_STATUS, b"\x00")):
            assert decode_boundary(encode_boundary(direction, payload)) == (direction, payload)

    def test_rejects_empty_payload_and_bad_direction(self):
        with pytest.raises(BoundaryError):
            encode_boundary(DIR_SM_UPLINK, b"")
        with pytest.raises(BoundaryError):
            decode_boundary(b"\x09\x01")
        with pytest.raises(BoundaryError):
            decode_boundary(b"")


class TestSetup:
    def test_handshake_matches_golden_vector(self):
        ric = ManualRic()
        agent = E2Agent.fused(AgentConfig(gnb_id=1), make_sim(), ric.factory)
        agent.pump(0.0)
        ric.recv()
        assert bytes(ric.raw) == bytes.fromhex("0000000a01000001000400000001")

    def test_backoff_schedule_connects_on_third_attempt(self):
        ric = ManualRic()
        ric_up_at = 1.0
        attempt_times = []

        def factory():
            attempt_times.append(now[0])
            if now[0] < ric_up_at:
                raise ConnectionError("controller down")
            return ric.agent_end

        term = E2apTermination(AgentConfig(gnb_id=1), factory, FusedBoundary.pair()[0])
        now = [0.0]
        for t in [0.0, 0.1, 0.5, 0.6, 1.0, 1.4, 1.5, 1.6]:
            now[0] = t
            term.pump(t)
        # base 500 ms backoff: attempts at 0, 0.5, then success at 1.5
        assert attempt_times == [0.0, 0.5, 1.5]
        assert term.setup_attempts == 3
        ric.recv()
        assert ric.frames[-1].msg_type == MsgType.SETUP_REQ

    def test_backoff_caps_at_8s(self):
        calls = []

        def factory():
            calls.append(None)
            raise ConnectionError("still down")

        term = E2apTermination(AgentConfig(gnb_id=1), factory, FusedBoundary.pair()[0])
        t = 0.0
        for _ in range(10):
            term.pump(t)
            t = term._next_attempt_s
        # 0, .5, 1, 2, 4, 8, 8, 8 deltas
        assert term._backoff_s == 8.0

    def test_setup_reject_retries_and_counts(self):
        ric = ManualRic()
        agent = E2Agent.fused(AgentConfig(gnb_id=1), make_sim(), ric.factory)
        agent.pump(0.0)
        (setup,) = ric.recv()
        ric.send(frame(MsgType.SETUP_RESP, setup.txid, cause=Cause.UNKNOWN_FUNCTION))
        agent.pump(0.0)
        assert not agent.termination.established
        assert agent.termination.setup_rejects == 1


class TestSubscription:
    def test_accepts_and_reports_each_window(self):
        ric, agent, sim = established_agent()
        resp = subscribe(ric, agent)
        assert resp.uint(Tag.CAUSE) == Cause.OK
        sub_id = resp.uint(Tag.SUBSCRIPTION_ID)
        for _ in range(5):
            sim.step_window()
            agent.pump(0.0)
        inds = [f for f in ric.recv() if f.msg_type == MsgType.INDICATION]
        assert len(inds) == 5
        assert all(f.uint(Tag.SUBSCRIPTION_ID) == sub_id for f in inds)

    def test_period_below_floor_rejected(self):
        ric, agent, _ = established_agent()
        resp = subscribe(ric, agent, period=5)
        assert resp.uint(Tag.CAUSE) == Cause.REJECT

    def test_unknown_function_rejected(self):
        ric, agent, _ = established_agent()
        txid = ric.fresh_txid()
        ric.send(frame(MsgType.SUB_REQ, txid, gnb_id=1, ran_function_id=9, period_ms=100))
        agent.pump(0.0)
        (resp,) = [f for f in ric.recv() if f.msg_type == MsgType.SUB_RESP]
        assert resp.uint(Tag.CAUSE) == Cause.UNKNOWN_FUNCTION

    def test_duplicate_subscription_gets_independent_stream(self):
        ric, agent, sim = established_agent()
        first = subscribe(ric, agent).uint(Tag.SUBSCRIPTION_ID)
        second = subscribe(ric, agent).uint(Tag.SUBSCRIPTION_ID)
        assert first != second
        sim.step_window()
        agent.pump(0.0)
        inds = [f for f in ric.recv() if f.msg_type == MsgType.INDICATION]
        assert sorted(f.uint(Tag.SUBSCRIPTION_ID) for f in inds) == [first, second]

    def test_longer_period_decimates(self):
        ric, agent, sim = established_agent()
        sub_id = subscribe(ric, agent, period=200).uint(Tag.SUBSCRIPTION_ID)
        for _ in range(6):
            sim.step_window()
            agent.pump(0.0)
        inds = [f for f in ric.recv() if f.msg_type == MsgType.INDICATION
                and f.uint(Tag.SUBSCRIPTION_ID) == sub_id]
        assert len(inds) == 3


class TestControl:
    def control(self, ric, agent, entries, now=0.0):
        txid = ric.fresh_txid()
        payload = codec.encode_sm_payload(SpsCommand(entries=entries))
        ric.send(frame(MsgType.CONTROL_REQ, txid, gnb_id=1, sm_payload=payload))
        agent.pump(now)
        agent.pump(now)  # second round: ack status back through the boundary
        acks = [f for f in ric.recv() if f.msg_type == MsgType.CONTROL_ACK and f.txid == txid]
        return acks[0] if acks else None

    def test_valid_control_applies_and_acks(self):
        ric, agent, sim = established_agent()
        ack = self.control(ric, agent, (SpsEntry(1, 37), SpsEntry(2, 25), SpsEntry(3, 3)))
        assert ack.uint(Tag.CAUSE) == Cause.OK
        out = sim.step_tti()
        assert out.grants == {1: 37, 2: 25, 3: 3}

    def test_malformed_payload_nacked_and_not_forwarded(self):
        ric, agent, sim = established_agent()
        txid = ric.fresh_txid()
        ric.send(frame(MsgType.CONTROL_REQ, txid, gnb_id=1, sm_payload=b"\x02\x00\x05\x01"))
        agent.pump(0.0)
        agent.pump(0.0)
        (ack,) = [f for f in ric.recv() if f.msg_type == MsgType.CONTROL_ACK]
        assert ack.uint(Tag.CAUSE) == Cause.MALFORMED
        sim.step_tti()
        assert sim.fixed_grants() == {}

    def test_unknown_ue_acked_ok_with_ignore_semantics(self):
        ric, agent, sim = established_agent()
        ack = self.control(ric, agent, (SpsEntry(99, 10),))
        assert ack.uint(Tag.CAUSE) == Cause.OK
        sim.step_tti()
        assert sim.fixed_grants() == {}

    def test_rejected_command_maps_to_reject_cause(self):
        ric, agent, _ = established_agent()
        ack = self.control(ric, agent, (SpsEntry(1, 40), SpsEntry(2, 40)))
        assert ack.uint(Tag.CAUSE) == Cause.REJECT

    def test_dropped_boundary_datagram_surfaces_error_after_timeout(self):
        ric, agent, _ = established_agent()
        agent._endpoints[0].drop_next = 1  # lose the SM_DOWNLINK datagram
        txid = ric.fresh_txid()
        payload = codec.encode_sm_payload(SpsCommand(entries=(SpsEntry(1, 5),)))
        ric.send(frame(MsgType.CONTROL_REQ, txid, gnb_id=1, sm_payload=payload))
        agent.pump(0.0)
        agent.pump(0.1)
        assert not [f for f in ric.recv() if f.msg_type == MsgType.CONTROL_ACK]
        agent.pump(0.21)  # past 2x the 100 ms report period
        errors = [f for f in ric.recv() if f.msg_type == MsgType.ERROR]
        assert len(errors) == 1
        assert agent.termination.control_timeouts == 1


class TestSessionLoss:
    def test_stream_loss_triggers_full_resetup(self):
        ric, agent, _ = established_agent()
        subscribe(ric, agent)
        ric.end.close()
        agent.pump(1.0)
        assert not agent.termination.established
        # a fresh stream would be requested after the backoff elapses
        assert agent.termination._next_attempt_s > 1.0


def drive_script(boundary_kind):
    """Fixed interaction script; returns all bytes the agent sent to the RIC."""
    ric, agent, sim = established_agent(boundary=boundary_kind)

    def pump_until(predicate, limit=400):
        for _ in range(limit):
            agent.pump(0.0)
            ric.recv()
            if predicate():
                return
            time.sleep(0.002 if boundary_kind == "udp" else 0)
        raise AssertionError("script step never completed")

    sub = subscribe(ric, agent)
    assert sub.uint(Tag.CAUSE) == Cause.OK
    sim.step_window()
    pump_until(lambda: any(f.msg_type == MsgType.INDICATION for f in ric.frames))
    payload = codec.encode_sm_payload(SpsCommand(entries=(SpsEntry(1, 37),)))
    ric.send(frame(MsgType.CONTROL_REQ, ric.fresh_txid(), gnb_id=1, sm_payload=payload))
    pump_until(lambda: any(f.msg_type == MsgType.CONTROL_ACK for f in ric.frames))
    sim.step_window()
    pump_until(lambda: sum(f.msg_type == MsgType.INDICATION for f in ric.frames) >= 2)
    agent.close()
    return bytes(ric.raw)


class TestProcessSplitTransparency:
    def test_fused_and_udp_boundaries_yield_identical_frame_streams(self):
        assert drive_script("fused") == drive_script("udp")


@pytest.mark.slow
class TestStandaloneProcess:
    def test_subprocess_termination_half(self):
        from oranlab.ric import Ric, RicServer
        from oranlab.xapp_sdk import XappHandle

        ric = Ric()
        server = RicServer(ric).start()
        gnb_boundary = UdpBoundary()
        proc_port_holder = UdpBoundary()  # reserve a distinct local port
        local_port = proc_port_holder.address[1]
        proc_port_holder.close()
        gnb_boundary.set_peer(("127.0.0.1", local_port))
        sim = make_sim()
        sm = SmTask(sim, gnb_boundary)
        proc = subprocess.Popen([
            sys.executable, "-m", "oranlab.e2_agent",
            "--gnb-id", "7", "--ric", f"127.0.0.1:{server.address[1]}",
            "--local-port", str(local_port),
            "--peer-port", str(gnb_boundary.address[1]),
        ])
        try:
            deadline = time.monotonic() + 8
            while time.monotonic() < deadline and ric.get_gnb_id_list() != [7]:
                time.sleep(0.05)
            assert ric.get_gnb_id_list() == [7]
            handle = XappHandle(ric, "probe")
            sub_id = handle.e2ap_subscribe(7, 100)
            assert sub_id >= 1
            sim.step_window()
            sm.pump()
            deadline = time.monotonic() + 5
            msg = None
            while time.monotonic() < deadline and msg is None:
                msg = handle.get_queued_rx_msg()
                sm.pump()
                time.sleep(0.02)
            assert msg is not None and msg.report.period_ms == 100
            token = handle.e2ap_control_request(7, SpsCommand(entries=(SpsEntry(1, 12),)))
            deadline = time.monotonic() + 5
            ack = None
            while time.monotonic() < deadline and ack is None:
                sm.pump()
                m = handle.get_queued_rx_msg()
                if m is not None and getattr(m, "token", None) == token:
                    ack = m
                time.sleep(0.02)
            assert ack is not None and ack.ok
            sim.step_tti()
            assert sim.fixed_grants() == {1: 12}
        finally:
            proc.terminate()
            proc.wait(timeout=5)
            server.stop()
            gnb_boundary.close()
