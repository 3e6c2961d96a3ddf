"""Ring-buffered port wrapper.

Wraps another port and replaces the rendezvous handoff with a ring buffer so
writers only block when the buffer is full and readers only when it is empty.
Constructed from buffered:// stream URLs whose nme-buffered-protocol query
parameter names the wrapped protocol.
"""

from __future__ import annotations

import threading
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

from mediaengine.runtime import StopToken
from mediaengine.streamio import ClosedPipe, Connection, RingBuffer, StreamIOError
from mediaengine.streamio.httpport import CHUNK_SIZE, INPUT, OUTPUT, HttpPort

DEFAULT_CAPACITY = 10 * 1024 * 1024  # 10 megabytes
PROTOCOL_PARAM = "nme-buffered-protocol"
CAPACITY_PARAM = "nme-buffered-capacity"


class BufferedPort:
    """Buffered IO around a wrapped port.

    Input role: the wrapped port fills the buffer, this port drains it into
    the downstream connection. Output role: writers fill the buffer, this
    port drains it into the wrapped port.
    """

    def __init__(self, wrapped, capacity: int = DEFAULT_CAPACITY):
        self.wrapped = wrapped
        self.name = wrapped.name
        self.role = wrapped.role
        self.mode = wrapped.mode
        self.buffer = RingBuffer(capacity)
        self.connection: Connection | None = None
        if self.role == INPUT:
            # wrapped port writes into the ring instead of the final sink
            wrapped.connect(Connection(_RingWriter(self.buffer)))

    @property
    def capacity(self) -> int:
        return self.buffer.capacity

    def connect(self, connection: Connection) -> None:
        self.connection = connection

    def listener_spec(self):
        return self.wrapped.listener_spec()

    def register_routes(self, server) -> None:
        self.wrapped.register_routes(server)

    def write(self, data: bytes) -> None:
        if self.role != OUTPUT:
            raise StreamIOError(f"port {self.name} is not an output port")
        self.buffer.write(data)

    def close(self) -> None:
        self.buffer.close_write()

    def start(self, stop: StopToken) -> None:
        watcher = threading.Thread(target=self._watch_stop, args=(stop,), daemon=True)
        watcher.start()
        wrapped_thread = threading.Thread(target=self._run_wrapped, args=(stop,), daemon=True)
        wrapped_thread.start()
        try:
            if self.role == INPUT:
                self._drain_to_connection()
            else:
                self._drain_to_wrapped()
        finally:
            wrapped_thread.join(timeout=5)
        if self.wrapped.error is not None:
            raise self.wrapped.error

    def _watch_stop(self, stop: StopToken) -> None:
        stop.wait()
        self.buffer.close_write()
        self.buffer.close_read()

    def _run_wrapped(self, stop: StopToken) -> None:
        try:
            self.wrapped.start(stop)
        except Exception:
            pass  # surfaced via wrapped.error
        finally:
            if self.role == INPUT:
                self.buffer.close_write()

    def _drain_to_connection(self) -> None:
        if self.connection is None:
            raise StreamIOError(f"buffered input port {self.name} has no connection")
        while True:
            chunk = self.buffer.read(CHUNK_SIZE)
            if not chunk:  # ring EOF: wrapped port finished
                break
            self.connection.write(chunk)
        self.connection.close()

    def _drain_to_wrapped(self) -> None:
        try:
            while True:
                chunk = self.buffer.read(CHUNK_SIZE)
                if not chunk:
                    break
                self.wrapped.write(chunk)
        finally:
            self.wrapped.close()

    @property
    def error(self):
        return self.wrapped.error


class _RingWriter:
    def __init__(self, buffer: RingBuffer):
        self._buffer = buffer

    def write(self, data: bytes) -> None:
        try:
            self._buffer.write(data)
        except ClosedPipe as e:
            raise StreamIOError(str(e)) from e

    def close(self) -> None:
        self._buffer.close_write()


def split_buffered_url(url: str) -> tuple[str, str, int]:
    """Split a buffered:// URL into (wrapped protocol, transformed URL,
    capacity)."""
    parts = urlsplit(url)
    params = dict(parse_qsl(parts.query))
    protocol = params.pop(PROTOCOL_PARAM, "http")
    capacity = DEFAULT_CAPACITY
    if CAPACITY_PARAM in params:
        capacity = int(params.pop(CAPACITY_PARAM))
    inner = urlunsplit((protocol, parts.netloc, parts.path, urlencode(params), parts.fragment))
    return protocol, inner, capacity
