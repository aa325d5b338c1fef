"""Local-socket control channel with filesystem discovery.

Each publisher listens on a stream socket at
``<runtime_root>/<topic>/<uuid>.sock``; subscribers find publishers by
scanning the topic directory (rescanned every ``rescan_interval``), so no
broker process is needed.  Envelopes travel length-framed (u32 prefix).  The
publisher never blocks on a slow subscriber: writes are non-blocking, a
partially written frame is finished before anything newer, and frames that
do not fit are dropped for that connection and counted.

On connect a subscriber sends one 8-byte hello (``TZCS`` + u32 ident) so the
publisher can label per-connection delivery stats; everything after that
flows publisher to subscriber only.
"""

from __future__ import annotations

import os
import re
import secrets
import selectors
import socket
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EndpointCollisionError, TransportError, WireError
from .wire import ControlEnvelope, decode_envelope

_U32 = struct.Struct("<I")
HELLO_MAGIC = b"TZCS"
HELLO_SIZE = 8
MAX_FRAME_BYTES = 1 << 30
_RECV_CHUNK = 1 << 20


def runtime_root() -> Path:
    env = os.environ.get("TZC_RUNTIME_DIR")
    if env:
        return Path(env)
    return Path(tempfile.gettempdir()) / "tzc"


def _sanitize(topic: str) -> str:
    return re.sub(r"[^\w.-]", "_", topic) or "_"


def topic_dir(topic: str) -> Path:
    return runtime_root() / _sanitize(topic)


def socket_path(topic: str, uuid: str) -> Path:
    return topic_dir(topic) / f"{uuid}.sock"


@dataclass
class ConnStats:
    ident: int | None
    delivered: int = 0
    dropped: int = 0
    open: bool = True


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.hello = bytearray()
        self.pending = bytearray()  # unwritten tail of the frame in flight
        self.pending_delivery = False
        self.stats = ConnStats(ident=None)

    def close(self):
        if self.stats.open:
            self.stats.open = False
            try:
                self.sock.close()
            except OSError:
                pass


class PublisherEndpoint:
    """Accepts subscriber connections for one topic and pushes envelopes."""

    def __init__(self, topic: str, uuid: str):
        self.topic = topic
        self.uuid = uuid
        self.path = socket_path(topic, uuid)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._replace_stale(self.path)
        self._srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._srv.bind(str(self.path))
        self._srv.listen(128)
        self._srv.setblocking(False)
        self._conns: list[_Conn] = []
        self._closed = False

    @staticmethod
    def _replace_stale(path: Path) -> None:
        probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        probe.settimeout(0.2)
        try:
            probe.connect(str(path))
        except (ConnectionRefusedError, FileNotFoundError):
            path.unlink(missing_ok=True)  # dead owner; take the path over
            return
        except OSError:
            path.unlink(missing_ok=True)
            return
        finally:
            probe.close()
        raise EndpointCollisionError(f"live publisher already at {path}")

    # -- connection upkeep ------------------------------------------------------

    def service(self) -> None:
        """Accept pending connections and read hellos; never blocks."""
        while True:
            try:
                sock, _ = self._srv.accept()
            except (BlockingIOError, OSError):
                break
            sock.setblocking(False)
            self._conns.append(_Conn(sock))
        for conn in self._conns:
            if conn.stats.open and conn.stats.ident is None:
                self._read_hello(conn)

    def _read_hello(self, conn: _Conn) -> None:
        try:
            data = conn.sock.recv(HELLO_SIZE - len(conn.hello))
        except BlockingIOError:
            return
        except OSError:
            conn.close()
            return
        if data == b"":
            conn.stats.ident = -1  # closed before a full hello
            return
        conn.hello += data
        if len(conn.hello) == HELLO_SIZE:
            if conn.hello[:4] == HELLO_MAGIC:
                conn.stats.ident = _U32.unpack(conn.hello[4:])[0]
            else:
                conn.stats.ident = -1

    @property
    def connection_count(self) -> int:
        return sum(1 for c in self._conns if c.stats.open)

    def stats(self) -> list[ConnStats]:
        return [c.stats for c in self._conns]

    # -- sending -------------------------------------------------------------------

    def _try_send(self, conn: _Conn, data) -> int:
        """Send as much as possible; returns bytes written, closes on error."""
        total = 0
        view = memoryview(data)
        while total < len(view):
            try:
                n = conn.sock.send(view[total:])
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                conn.close()
                break
            if n == 0:
                break
            total += n
        return total

    def _flush(self, conn: _Conn) -> None:
        if not conn.pending:
            return
        n = self._try_send(conn, conn.pending)
        del conn.pending[:n]
        if not conn.pending and conn.pending_delivery and conn.stats.open:
            conn.stats.delivered += 1
            conn.pending_delivery = False

    def broadcast(self, payload: bytes) -> int:
        """Length-frame ``payload`` to every connection.  Returns how many
        subscribers got the whole frame immediately; a frame that cannot even
        start is dropped for that subscriber (newest loses)."""
        if self._closed:
            raise TransportError("endpoint is closed")
        self.service()
        frame = _U32.pack(len(payload)) + payload
        delivered = 0
        for conn in self._conns:
            if not conn.stats.open:
                continue
            self._flush(conn)
            if not conn.stats.open:
                continue
            if conn.pending:
                conn.stats.dropped += 1
                continue
            n = self._try_send(conn, frame)
            if not conn.stats.open:
                continue
            if n == len(frame):
                conn.stats.delivered += 1
                delivered += 1
            elif n > 0:
                conn.pending += frame[n:]
                conn.pending_delivery = True
            else:
                conn.stats.dropped += 1
        return delivered

    def close(self, flush_timeout: float = 2.0) -> None:
        """Flush what can be flushed within the deadline, then tear down.
        Frames still unfinished count as dropped."""
        if self._closed:
            return
        self._closed = True
        deadline = time.monotonic() + flush_timeout
        while time.monotonic() < deadline and any(
                c.pending and c.stats.open for c in self._conns):
            for conn in self._conns:
                if conn.stats.open:
                    self._flush(conn)
            time.sleep(0.005)
        for conn in self._conns:
            if conn.pending and conn.stats.open:
                conn.stats.dropped += 1
                conn.pending.clear()
            conn.close()
        self._srv.close()
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


class _SubConn:
    def __init__(self, sock: socket.socket, path: str):
        self.sock = sock
        self.path = path
        self.buf = bytearray()
        self.eof = False


class SubscriberLink:
    """Connects to every live publisher of a topic and yields complete
    envelopes via readiness-based polling."""

    def __init__(self, topic: str, rescan_interval: float = 1.0,
                 ident: int | None = None):
        self.topic = topic
        self.rescan_interval = rescan_interval
        self.ident = secrets.randbelow(2**32) if ident is None else ident
        self.decode_errors = 0
        self._conns: dict[str, _SubConn] = {}
        self._sel = selectors.DefaultSelector()
        self._next_rescan = 0.0
        self._closed = False

    def connected_paths(self) -> set:
        return set(self._conns)

    def rescan(self) -> None:
        """Connect to any newly appeared publisher socket for the topic."""
        self._next_rescan = time.monotonic() + self.rescan_interval
        d = topic_dir(self.topic)
        if not d.is_dir():
            return
        for p in sorted(d.glob("*.sock")):
            key = str(p)
            if key in self._conns:
                continue
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(0.5)
            try:
                sock.connect(key)
                sock.sendall(HELLO_MAGIC + _U32.pack(self.ident))
            except OSError:
                sock.close()
                continue
            sock.setblocking(False)
            conn = _SubConn(sock, key)
            self._conns[key] = conn
            self._sel.register(sock, selectors.EVENT_READ, conn)

    def _drop(self, conn: _SubConn) -> None:
        self._conns.pop(conn.path, None)
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()

    def _pump(self, conn: _SubConn) -> None:
        while True:
            try:
                data = conn.sock.recv(_RECV_CHUNK)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                conn.eof = True  # dropped after buffered frames are extracted
                return
            if data == b"":
                conn.eof = True  # publisher gone
                return
            conn.buf += data
            if len(data) < _RECV_CHUNK:
                return

    def _extract(self, conn: _SubConn, out: list) -> None:
        buf = conn.buf
        while len(buf) >= 4:
            n = _U32.unpack(buf[:4])[0]
            if n > MAX_FRAME_BYTES:
                self._drop(conn)
                self.decode_errors += 1
                return
            if len(buf) < 4 + n:
                return
            frame = bytes(buf[4:4 + n])
            del buf[:4 + n]
            try:
                out.append(decode_envelope(frame))
            except WireError:
                self.decode_errors += 1
                self._drop(conn)
                return

    def poll_wait(self, timeout: float) -> list[ControlEnvelope]:
        """Block up to ``timeout`` seconds for complete envelopes across all
        connections; returns as soon as at least one is available."""
        if self._closed:
            raise TransportError("link is closed")
        deadline = time.monotonic() + max(timeout, 0.0)
        ready: list[ControlEnvelope] = []
        while True:
            now = time.monotonic()
            if now >= self._next_rescan:
                self.rescan()
            for conn in list(self._conns.values()):
                self._extract(conn, ready)
                if conn.eof and conn.path in self._conns:
                    self._drop(conn)  # any partial trailing frame is discarded
            if ready:
                return ready
            now = time.monotonic()
            if now >= deadline:
                return ready
            wait = min(deadline, self._next_rescan) - now
            events = self._sel.select(max(wait, 0.0))
            for key, _ in events:
                self._pump(key.data)
            for conn in list(self._conns.values()):
                self._extract(conn, ready)
                if conn.eof and conn.path in self._conns:
                    self._drop(conn)
            if ready:
                return ready

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for conn in list(self._conns.values()):
            self._drop(conn)
        self._sel.close()


def listen(topic: str, uuid: str) -> PublisherEndpoint:
    return PublisherEndpoint(topic, uuid)


def broadcast(endpoint: PublisherEndpoint, payload: bytes) -> int:
    return endpoint.broadcast(payload)


def poll_wait(link: SubscriberLink, timeout: float) -> list[ControlEnvelope]:
    return link.poll_wait(timeout)
