"""Stream IO building blocks for media functions.

Connections are byte sinks; a Stream fans out to several connections and a
write completes only when every connection accepted the bytes. Ports bind a
TDD port name to a stream URL and run as active members under an IO manager:
input-push and output-pull act as listeners, input-pull and output-push as
clients. Port-to-connection handoff uses an unbuffered rendezvous pipe;
BufferedPort swaps the pipe for a ring buffer that only blocks when full
(writes) or empty (reads).

The IO manager starts all members together, rejects listener port conflicts
up front and treats the termination of any critical member as a signal to
wind down the rest.
"""

from __future__ import annotations

import threading
from typing import Any, Callable

from mediaengine.runtime import StopToken


class StreamIOError(Exception):
    pass


class ClosedPipe(StreamIOError):
    pass


class ListenerConflict(StreamIOError):
    pass


class UnknownProtocol(StreamIOError):
    pass


class MalformedURL(StreamIOError):
    pass


class PeerUnreachable(StreamIOError):
    pass


class StreamWriteError(StreamIOError):
    pass


class Pipe:
    """Unbuffered byte pipe: a write returns only when a reader consumed all
    of it, giving rendezvous backpressure between port and connection."""

    def __init__(self):
        self._cond = threading.Condition()
        self._chunk: memoryview | None = None
        self._write_closed = False
        self._read_closed = False
        self._error: Exception | None = None

    def write(self, data: bytes) -> None:
        if not data:
            return
        with self._cond:
            if self._write_closed or self._read_closed:
                raise ClosedPipe(str(self._error) if self._error else "pipe closed")
            while self._chunk is not None:
                self._cond.wait()
                if self._read_closed:
                    raise ClosedPipe("pipe reader closed")
            self._chunk = memoryview(bytes(data))
            self._cond.notify_all()
            while self._chunk is not None and not self._read_closed:
                self._cond.wait()
            if self._chunk is not None:
                self._chunk = None
                raise ClosedPipe("pipe reader closed")

    def read(self, max_bytes: int = 64 * 1024) -> bytes:
        with self._cond:
            while self._chunk is None:
                if self._write_closed or self._read_closed:
                    if self._error is not None:
                        raise StreamIOError(str(self._error))
                    return b""
                self._cond.wait()
            take = min(max_bytes, len(self._chunk))
            out = bytes(self._chunk[:take])
            if take == len(self._chunk):
                self._chunk = None
            else:
                self._chunk = self._chunk[take:]
            self._cond.notify_all()
            return out

    def close_write(self, error: Exception | None = None) -> None:
        with self._cond:
            self._write_closed = True
            if error is not None and self._error is None:
                self._error = error
            self._cond.notify_all()

    def close_read(self, error: Exception | None = None) -> None:
        with self._cond:
            self._read_closed = True
            self._chunk = None
            if error is not None and self._error is None:
                self._error = error
            self._cond.notify_all()


class RingBuffer:
    """Bounded FIFO byte buffer; write blocks only when full, read only when
    empty. Capacity is honored exactly."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._buf = bytearray(capacity)
        self._cond = threading.Condition()
        self._start = 0
        self._size = 0
        self._write_closed = False
        self._read_closed = False

    def __len__(self) -> int:
        with self._cond:
            return self._size

    def write(self, data: bytes) -> None:
        view = memoryview(bytes(data))
        with self._cond:
            while view:
                if self._read_closed:
                    raise ClosedPipe("ring buffer reader closed")
                if self._write_closed:
                    raise ClosedPipe("ring buffer closed for writing")
                free = self.capacity - self._size
                if free == 0:
                    self._cond.wait()
                    continue
                take = min(free, len(view))
                end = (self._start + self._size) % self.capacity
                first = min(take, self.capacity - end)
                self._buf[end:end + first] = view[:first]
                if take > first:
                    self._buf[:take - first] = view[first:take]
                self._size += take
                view = view[take:]
                self._cond.notify_all()

    def read(self, max_bytes: int = 64 * 1024) -> bytes:
        with self._cond:
            while self._size == 0:
                if self._write_closed or self._read_closed:
                    return b""
                self._cond.wait()
            take = min(max_bytes, self._size)
            first = min(take, self.capacity - self._start)
            out = bytes(self._buf[self._start:self._start + first])
            if take > first:
                out += bytes(self._buf[:take - first])
            self._start = (self._start + take) % self.capacity
            self._size -= take
            self._cond.notify_all()
            return out

    def close_write(self) -> None:
        with self._cond:
            self._write_closed = True
            self._cond.notify_all()

    def close_read(self) -> None:
        with self._cond:
            self._read_closed = True
            self._cond.notify_all()


class Connection:
    """Byte sink wrapping any object with write(bytes); close is idempotent
    and writes after close fail."""

    def __init__(self, writer: Any, closer: Callable[[], None] | None = None):
        self._writer = writer
        self._closer = closer
        self._closed = False
        self._lock = threading.Lock()

    def write(self, data: bytes) -> None:
        with self._lock:
            if self._closed:
                raise StreamIOError("write to closed connection")
        self._writer.write(data)

    def write_all_from(self, reader: Any, chunk_size: int = 64 * 1024) -> int:
        total = 0
        while True:
            chunk = reader.read(chunk_size)
            if not chunk:
                return total
            self.write(chunk)
            total += len(chunk)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        if self._closer is not None:
            self._closer()
        elif hasattr(self._writer, "close"):
            self._writer.close()

    @property
    def closed(self) -> bool:
        return self._closed


class NullConnection(Connection):
    """Discards everything; counts bytes for diagnostics."""

    def __init__(self):
        self.received = 0
        super().__init__(self, closer=lambda: None)

    def write(self, data: bytes) -> None:  # type: ignore[override]
        self.received += len(data)


class Stream:
    """Fan-out over an ordered set of connections.

    A write is observed fully by all connections or the write errors; a
    failing connection fails the whole stream write.
    """

    def __init__(self, connections: list[Connection] | None = None):
        self.connections: list[Connection] = list(connections or [])

    def connect(self, connection: Connection) -> None:
        self.connections.append(connection)

    def write(self, data: bytes) -> None:
        for i, connection in enumerate(self.connections):
            try:
                connection.write(data)
            except Exception as e:
                raise StreamWriteError(f"connection {i} failed: {e}") from e

    def write_all_from(self, reader: Any, chunk_size: int = 64 * 1024) -> int:
        total = 0
        while True:
            chunk = reader.read(chunk_size)
            if not chunk:
                return total
            self.write(chunk)
            total += len(chunk)

    def close(self) -> None:
        errors = []
        for connection in self.connections:
            try:
                connection.close()
            except Exception as e:
                errors.append(e)
        if errors:
            raise StreamWriteError("; ".join(str(e) for e in errors))


def group_fanout_ports(port_names: list[str]) -> dict[str, list[str]]:
    """Group dot-suffixed port instance names by base name.

    ["out.0", "out.1"] feed one logical stream under base "out"; a lone
    "out" is its own group. Groups are disjoint by construction.
    """
    groups: dict[str, list[str]] = {}
    for name in port_names:
        base = name.split(".", 1)[0] if "." in name else name
        groups.setdefault(base, []).append(name)
    for members in groups.values():
        members.sort()
    return groups


class IOManager:
    """Starts all registered members together; critical-member termination
    cancels the rest. Listener ports are checked for conflicts and their
    shared servers constructed before anything runs."""

    def __init__(self, name: str = "io"):
        self.name = name
        self._members: list[tuple[str, Any, bool]] = []
        self._ports: list[Any] = []
        self.errors: dict[str, Exception] = {}

    def add_member(self, name: str, starter: Callable[[StopToken], None], critical: bool = True) -> None:
        self._members.append((name, starter, critical))

    def add_port(self, port: Any, critical: bool = True) -> None:
        self._ports.append(port)
        self._members.append((f"port:{port.name}", port.start, critical))

    def run(self, stop: StopToken) -> None:
        from mediaengine.streamio.httpport import build_servers

        token = stop.child()
        servers = build_servers(self._ports)  # raises ListenerConflict
        lock = threading.Lock()

        def run_member(member_name: str, starter, critical: bool):
            failed = False
            try:
                starter(token)
            except Exception as e:
                failed = True
                with lock:
                    self.errors[member_name] = e
            finally:
                # normal termination of a non-critical member is ignored;
                # critical termination and any member error cancel the rest
                if critical or failed:
                    token.stop()

        # servers are infrastructure: they outlive the members and stop after
        # the last member exited
        infra_token = token.child()
        server_threads = []
        for server in servers:
            server.bind()
            t = threading.Thread(target=server.start, args=(infra_token,),
                                 name=f"{self.name}/server:{server.address}", daemon=True)
            server_threads.append(t)
            t.start()

        threads = []
        for member_name, starter, critical in self._members:
            t = threading.Thread(target=run_member, args=(member_name, starter, critical),
                                 name=f"{self.name}/{member_name}", daemon=True)
            threads.append(t)
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        infra_token.stop()
        for t in server_threads:
            t.join(timeout=5)

    @property
    def failed(self) -> bool:
        return bool(self.errors)
