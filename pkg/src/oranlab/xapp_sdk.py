"""Developer-facing xApp surface over the controller's queues and routing.

A handle is owned by one xApp control thread.  ``get_queued_rx_msg`` never
blocks and delivers each routed message exactly once, in FIFO order.
"""

from __future__ import annotations

from .e2_codec import SpsCommand, decode_sm_payload, encode_sm_payload
from .ric import ControlOutcome, Indication, Ric

__all__ = ["XappHandle", "Indication", "ControlOutcome"]


class XappHandle:
    def __init__(self, ric: Ric, xapp_id: str):
        self.xapp_id = xapp_id
        self._ric = ric
        self._queue = ric.register_xapp(xapp_id)

    def get_gnb_id_list(self) -> list[int]:
        """Snapshot of connected node ids, ascending."""
        return self._ric.get_gnb_id_list()

    def get_queued_rx_msg(self) -> Indication | ControlOutcome | None:
        """Oldest queued message, or None immediately; never blocks."""
        return self._queue.pop()

    def e2ap_subscribe(self, gnb_id: int, period_ms: int) -> int:
        return self._ric.subscribe(self.xapp_id, gnb_id, period_ms)

    def e2ap_control_request(self, gnb_id: int, payload: SpsCommand | bytes) -> int:
        """Queue a control toward a node; returns a token the ack will carry.

        Raises immediately for an unknown node or a payload that does not
        encode as a service-model message.
        """
        if isinstance(payload, (bytes, bytearray)):
            decode_sm_payload(bytes(payload))
        else:
            encode_sm_payload(payload)
        return self._ric.route_control(self.xapp_id, gnb_id, payload)

    @property
    def queue_dropped(self) -> int:
        return self._queue.dropped
