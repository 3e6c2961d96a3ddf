"""Shared HTTP server construction.

A thin routing layer over the standard library's threading HTTP server with
the common middleware stack: context propagation (server cancellation signal
visible to handlers), request IDs (X-Request-ID echo or fresh UUIDv4) and
telemetry logging for non-health routes. Also provides the health API mounted
at /readyz and /healthz.

Request bodies stream (chunked transfer encoding and content-length both
supported); responses stream when the body is an iterator.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Iterable, Iterator
from urllib.parse import parse_qsl, urlsplit

logger = logging.getLogger("mediaengine.http")


class BindFailed(Exception):
    pass


@dataclass
class WebserverConfig:
    bind_address: str = "127.0.0.1:0"
    network: str = "tcp4"  # tcp4 | tcp6 | dual
    public_base_url: str = ""
    idle_timeout: float = 75.0
    read_timeout: float = 60.0
    write_timeout: float = 60.0

    def validate(self) -> list[str]:
        errors = []
        if self.network not in ("tcp4", "tcp6", "dual"):
            errors.append(f"webserver.network: unknown value {self.network!r}")
        for name in ("idle_timeout", "read_timeout", "write_timeout"):
            if getattr(self, name) <= 0:
                errors.append(f"webserver.{name} must be positive")
        if self.public_base_url:
            parts = urlsplit(self.public_base_url)
            if not parts.scheme or not parts.netloc:
                errors.append(f"webserver.publicBaseURL must be absolute, got {self.public_base_url!r}")
        return errors


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str]
    headers: dict[str, str]
    params: dict[str, str] = field(default_factory=dict)
    context: dict[str, Any] = field(default_factory=dict)
    remote_addr: str = ""
    _reader: Callable[[], Iterator[bytes]] | None = None
    _iter: Iterator[bytes] | None = None
    _body: bytes | None = None

    def body(self) -> bytes:
        if self._body is None:
            self._body = b"".join(self.iter_body())
        return self._body

    def iter_body(self) -> Iterator[bytes]:
        """Stream the request body; resumable, so a later drain continues
        where the handler stopped."""
        if self._body is not None:
            yield self._body
            return
        if self._iter is None:
            if self._reader is None:
                return
            self._iter = self._reader()
        yield from self._iter

    def drain(self) -> None:
        try:
            for _ in self.iter_body():
                pass
        except Exception:
            pass

    def header(self, name: str) -> str:
        return self.headers.get(name.lower(), "")


@dataclass
class Response:
    status: int = 200
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes | str | Iterable[bytes] = b""

    @classmethod
    def text(cls, status: int, message: str) -> "Response":
        return cls(status=status, headers={"Content-Type": "text/plain; charset=utf-8"}, body=message)

    @classmethod
    def json(cls, status: int, payload: bytes, content_type: str = "application/json") -> "Response":
        return cls(status=status, headers={"Content-Type": content_type}, body=payload)


Handler = Callable[[Request], Response]
Route = tuple[str, str, Handler]

HEALTH_PATHS = ("/healthz", "/readyz")


def _match(pattern: str, path: str) -> dict[str, str] | None:
    p_segments = [s for s in pattern.split("/") if s != ""]
    segments = [s for s in path.split("/") if s != ""]
    if len(p_segments) != len(segments):
        return None
    params: dict[str, str] = {}
    for p, s in zip(p_segments, segments):
        if p.startswith("{") and p.endswith("}"):
            params[p[1:-1]] = s
        elif p != s:
            return None
    return params


class _EngineHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, address, handler_cls, family):
        self.address_family = family
        super().__init__(address, handler_cls)


class HttpServer:
    """Routing HTTP server; runs as a starter under a stop signal."""

    def __init__(self, config: WebserverConfig, name: str = "http"):
        self.config = config
        self.name = name
        self._routes: list[tuple[str, str, Handler, bool]] = []
        self._server: _EngineHTTPServer | None = None
        self._stop_event = threading.Event()
        self._lock = threading.Lock()
        self._inflight = 0

    def add_route(self, method: str, pattern: str, handler: Handler, telemetry: bool = True) -> None:
        with self._lock:
            self._routes.append((method.upper(), pattern, handler, telemetry))

    def add_routes(self, routes: Iterable[Route], telemetry: bool = True) -> None:
        for method, pattern, handler in routes:
            self.add_route(method, pattern, handler, telemetry=telemetry)

    def mount_health(self, health_fn: Callable[[], None]) -> None:
        self.add_routes(health_endpoints(health_fn), telemetry=False)

    # -- lifecycle --

    def bind(self) -> tuple[str, int]:
        """Bind the listener and return (host, port); idempotent."""
        if self._server is not None:
            return self.bound_address()
        host, _, port_str = self.config.bind_address.rpartition(":")
        host = host or "127.0.0.1"
        try:
            port = int(port_str)
        except ValueError as e:
            raise BindFailed(f"bad bind address {self.config.bind_address!r}") from e
        family = {"tcp4": socket.AF_INET, "tcp6": socket.AF_INET6, "dual": socket.AF_INET6}[self.config.network]
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            timeout = self.config.read_timeout

            def log_message(self, fmt, *args):  # request logging goes through telemetry
                pass

            def _dispatch(self):
                outer._handle(self)

            do_GET = do_POST = do_PUT = do_PATCH = do_DELETE = do_HEAD = _dispatch

        try:
            self._server = _EngineHTTPServer((host, port), _Handler, family)
        except OSError as e:
            raise BindFailed(f"cannot bind {self.config.bind_address!r}: {e}") from e
        return self.bound_address()

    def bound_address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("server not bound")
        addr = self._server.server_address
        return addr[0], addr[1]

    @property
    def port(self) -> int:
        return self.bound_address()[1]

    def base_url(self) -> str:
        if self.config.public_base_url:
            return self.config.public_base_url.rstrip("/")
        host, port = self.bound_address()
        if ":" in host:
            host = f"[{host}]"
        return f"http://{host}:{port}"

    def start(self, stop) -> None:
        """Serve until the stop signal fires, then drain in-flight requests
        bounded by the write timeout."""
        self.bind()
        assert self._server is not None
        waiter = threading.Thread(target=lambda: (stop.wait(), self._server.shutdown()), daemon=True)
        waiter.start()
        try:
            self._server.serve_forever(poll_interval=0.05)
        finally:
            self._stop_event.set()
            deadline = time.monotonic() + self.config.write_timeout
            while self._inflight > 0 and time.monotonic() < deadline:
                time.sleep(0.01)
            self._server.server_close()

    # -- request handling --

    def _handle(self, h: BaseHTTPRequestHandler) -> None:
        with self._lock:
            self._inflight += 1
        try:
            self._handle_inner(h)
        finally:
            with self._lock:
                self._inflight -= 1

    def _handle_inner(self, h: BaseHTTPRequestHandler) -> None:
        started = time.monotonic()
        parts = urlsplit(h.path)
        request = Request(
            method=h.command,
            path=parts.path,
            query=dict(parse_qsl(parts.query)),
            headers={k.lower(): v for k, v in h.headers.items()},
            remote_addr=f"{h.client_address[0]}:{h.client_address[1]}",
            _reader=lambda: _body_reader(h),
        )
        request.context["stop"] = self._stop_event
        request.context["server"] = self
        # request id middleware
        request_id = request.header("X-Request-ID") or str(uuid.uuid4())
        request.context["request_id"] = request_id

        handler = None
        telemetry = True
        with self._lock:
            routes = list(self._routes)
        methods_for_path = set()
        for method, pattern, candidate, tele in routes:
            params = _match(pattern, parts.path)
            if params is None:
                continue
            methods_for_path.add(method)
            if method == h.command:
                handler, telemetry = candidate, tele
                request.params = params
                break

        if handler is None:
            status = 405 if methods_for_path else 404
            response = Response.text(status, "method not allowed" if methods_for_path else "not found")
        else:
            try:
                response = handler(request)
            except Exception:
                logger.exception("%s: handler for %s %s failed", self.name, h.command, parts.path)
                response = Response.text(500, "internal error")

        response.headers.setdefault("X-Request-ID", request_id)
        request.drain()  # keep-alive safety: never leave body bytes unread
        try:
            self._write_response(h, request, response)
        except (BrokenPipeError, ConnectionResetError):
            pass
        if telemetry:
            logger.info(
                "%s: %s %s -> %d remote=%s agent=%s time=%.6f request_id=%s",
                self.name, h.command, parts.path, response.status, request.remote_addr,
                request.header("User-Agent") or "-", time.monotonic() - started, request_id,
            )

    def _write_response(self, h: BaseHTTPRequestHandler, request: Request, response: Response) -> None:
        body = response.body
        if isinstance(body, str):
            body = body.encode("utf-8")
        h.send_response(response.status)
        for k, v in response.headers.items():
            h.send_header(k, v)
        if isinstance(body, bytes):
            h.send_header("Content-Length", str(len(body)))
            h.end_headers()
            if request.method != "HEAD":
                h.wfile.write(body)
        else:
            h.send_header("Transfer-Encoding", "chunked")
            h.end_headers()
            try:
                for chunk in body:
                    if not chunk:
                        continue
                    h.wfile.write(b"%x\r\n" % len(chunk))
                    h.wfile.write(chunk)
                    h.wfile.write(b"\r\n")
                    h.wfile.flush()
            finally:
                h.wfile.write(b"0\r\n\r\n")
                h.wfile.flush()


def _body_reader(h: BaseHTTPRequestHandler, chunk_size: int = 64 * 1024) -> Iterator[bytes]:
    transfer = (h.headers.get("Transfer-Encoding") or "").lower()
    if "chunked" in transfer:
        while True:
            line = h.rfile.readline(1024).strip()
            if b";" in line:
                line = line.split(b";", 1)[0]
            try:
                size = int(line, 16)
            except ValueError:
                return
            if size == 0:
                h.rfile.readline(1024)  # trailing CRLF
                return
            remaining = size
            while remaining > 0:
                piece = h.rfile.read(min(remaining, chunk_size))
                if not piece:
                    return
                remaining -= len(piece)
                yield piece
            h.rfile.read(2)  # CRLF after each chunk
        return
    length = int(h.headers.get("Content-Length") or 0)
    remaining = length
    while remaining > 0:
        piece = h.rfile.read(min(remaining, chunk_size))
        if not piece:
            return
        remaining -= len(piece)
        yield piece


def health_endpoints(health_fn: Callable[[], None]) -> list[Route]:
    """GET /readyz and /healthz: 200 when health_fn succeeds, 503 with the
    error message when it raises."""

    def handler(request: Request) -> Response:
        try:
            health_fn()
        except Exception as e:
            return Response.text(503, f"unhealthy: {e}")
        return Response.text(200, "ok")

    return [("GET", path, handler) for path in HEALTH_PATHS]


class ServerHandle:
    """A server started in the background; exposes the bound port and stop()."""

    def __init__(self, server: HttpServer):
        import threading as _threading

        self.server = server
        self._stop = _threading.Event()
        server.bind()
        self._thread = _threading.Thread(target=server.start, args=(self._stop,), daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self.server.port

    def base_url(self) -> str:
        return self.server.base_url()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        self._thread.join(timeout=timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
