"""Byte-stream and datagram endpoints used between the lab's components.

Two families with identical poll-style APIs so the protocol logic is
transport-agnostic:

* streams (reliable, ordered): in-memory pipe pairs for deterministic runs,
  TCP sockets for live runs;
* datagram boundaries (discrete messages): in-memory "fused" pairs, UDP
  sockets for live runs.

Every endpoint is safe to use with one sender thread and one receiver thread.
"""

from __future__ import annotations

import socket
import threading
from collections import deque


class TransportClosedError(ConnectionError):
    pass


# --- streams -----------------------------------------------------------------


class MemoryStream:
    """One endpoint of an in-process reliable ordered byte pipe."""

    def __init__(self):
        self._rx = deque()
        self._lock = threading.Lock()
        self._peer: MemoryStream | None = None
        self._closed = False
        self._peer_closed = False

    @staticmethod
    def pair() -> tuple["MemoryStream", "MemoryStream"]:
        a, b = MemoryStream(), MemoryStream()
        a._peer, b._peer = b, a
        return a, b

    def send(self, data: bytes) -> None:
        peer = self._peer
        if self._closed or peer is None:
            raise TransportClosedError("stream endpoint closed")
        with peer._lock:
            if peer._closed:
                raise TransportClosedError("peer endpoint closed")
            peer._rx.append(bytes(data))

    def drain(self) -> bytes:
        """All bytes received so far (possibly empty); never blocks."""
        with self._lock:
            if not self._rx:
                return b""
            out = b"".join(self._rx)
            self._rx.clear()
            return out

    def close(self) -> None:
        self._closed = True
        peer = self._peer
        if peer is not None:
            with peer._lock:
                peer._peer_closed = True

    @property
    def closed(self) -> bool:
        # Closed for reading once the peer hung up and the buffer is drained.
        with self._lock:
            return self._closed or (self._peer_closed and not self._rx)


class TcpStream:
    """Non-blocking wrapper over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 2.0) -> "TcpStream":
        sock = socket.create_connection((host, port), timeout=timeout)
        return cls(sock)

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosedError("socket closed")
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                self._closed = True
                raise TransportClosedError(str(exc)) from exc

    def drain(self) -> bytes:
        if self._closed:
            return b""
        chunks = []
        while True:
            try:
                chunk = self._sock.recv(65536)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._closed = True
                break
            if chunk == b"":
                self._closed = True
                break
            chunks.append(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass

    @property
    def closed(self) -> bool:
        return self._closed


class TcpListener:
    """Bound listening socket; ``accept`` never blocks."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self._sock.setblocking(False)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def accept(self) -> TcpStream | None:
        try:
            sock, _ = self._sock.accept()
        except (BlockingIOError, InterruptedError):
            return None
        except OSError:
            return None
        return TcpStream(sock)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


# --- datagram boundaries -----------------------------------------------------


class FusedBoundary:
    """In-process datagram pair preserving message boundaries."""

    def __init__(self):
        self._rx = deque()
        self._lock = threading.Lock()
        self._peer: FusedBoundary | None = None
        self.drop_next = 0  # test hook: silently drop the next N outgoing datagrams

    @staticmethod
    def pair() -> tuple["FusedBoundary", "FusedBoundary"]:
        a, b = FusedBoundary(), FusedBoundary()
        a._peer, b._peer = b, a
        return a, b

    def send(self, data: bytes) -> None:
        if self.drop_next > 0:
            self.drop_next -= 1
            return
        peer = self._peer
        if peer is None:
            raise TransportClosedError("boundary endpoint unpaired")
        with peer._lock:
            peer._rx.append(bytes(data))

    def poll(self) -> list[bytes]:
        with self._lock:
            out = list(self._rx)
            self._rx.clear()
            return out

    def close(self) -> None:
        pass


class UdpBoundary:
    """UDP endpoint bound to a local port, sending to a fixed peer port."""

    def __init__(self, local: tuple[str, int] = ("127.0.0.1", 0),
                 peer: tuple[str, int] | None = None):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(local)
        self._sock.setblocking(False)
        self._peer = peer
        self.drop_next = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def set_peer(self, peer: tuple[str, int]) -> None:
        self._peer = peer

    @staticmethod
    def pair(host: str = "127.0.0.1") -> tuple["UdpBoundary", "UdpBoundary"]:
        a = UdpBoundary((host, 0))
        b = UdpBoundary((host, 0), peer=a.address)
        a.set_peer(b.address)
        return a, b

    def send(self, data: bytes) -> None:
        if self._peer is None:
            raise TransportClosedError("no peer configured")
        if self.drop_next > 0:
            self.drop_next -= 1
            return
        try:
            self._sock.sendto(data, self._peer)
        except OSError as exc:
            raise TransportClosedError(str(exc)) from exc

    def poll(self) -> list[bytes]:
        out = []
        while True:
            try:
                data, _ = self._sock.recvfrom(65536)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                break
            out.append(data)
        return out

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
