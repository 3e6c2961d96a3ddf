"""HTTP/1.1 port implementation with chunked transfer encoding.

Four modes: input-push and output-pull listen (a shared server per host:port,
one path per port); input-pull and output-push act as clients. End-of-stream
propagates as connection close in every mode. Reserved nme-hdr- query
parameters are stripped off client URLs and applied as request headers.
"""

from __future__ import annotations

import threading
import time
from typing import Iterator
from urllib.parse import urlsplit

import requests

from mediaengine.httpkit import HttpServer, Request, Response, WebserverConfig
from mediaengine.model import strip_reserved_headers
from mediaengine.runtime import StopToken
from mediaengine.streamio import (
    Connection,
    ListenerConflict,
    MalformedURL,
    PeerUnreachable,
    Pipe,
    StreamIOError,
    UnknownProtocol,
)

INPUT = "input"
OUTPUT = "output"
PUSH = "push"
PULL = "pull"

CHUNK_SIZE = 64 * 1024


class HttpPort:
    """One NBMP port bound to an http(s) stream URL."""

    def __init__(self, name: str, role: str, mode: str, url: str,
                 connect_retries: int = 20, retry_delay: float = 0.1):
        if role not in (INPUT, OUTPUT):
            raise ValueError(f"role must be input or output, got {role!r}")
        if mode not in (PUSH, PULL):
            raise ValueError(f"mode must be push or pull, got {mode!r}")
        self.name = name
        self.role = role
        self.mode = mode
        self.raw_url = url
        self.url, self.headers = strip_reserved_headers(url)
        parts = urlsplit(self.url)
        if parts.scheme not in ("http", "https"):
            raise UnknownProtocol(f"{parts.scheme!r} is not an http port scheme")
        if not parts.netloc:
            raise MalformedURL(url)
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or (443 if parts.scheme == "https" else 80)
        self.path = parts.path or "/"
        self.connect_retries = connect_retries
        self.retry_delay = retry_delay

        self.pipe = Pipe()
        self.connection: Connection | None = None
        self._producer_taken = False
        self._serve_done = False
        self._get_active = False
        self._lock = threading.Lock()
        self._stop: StopToken | None = None
        self._response: requests.Response | None = None
        self.error: Exception | None = None

    # -- wiring --

    def connect(self, connection: Connection) -> None:
        self.connection = connection

    @property
    def is_listener(self) -> bool:
        return (self.role, self.mode) in ((INPUT, PUSH), (OUTPUT, PULL))

    def listener_spec(self) -> tuple[str, int, str] | None:
        if not self.is_listener:
            return None
        return self.host, self.port, self.path

    def register_routes(self, server: HttpServer) -> None:
        if self.role == INPUT and self.mode == PUSH:
            server.add_route("POST", self.path, self._handle_post, telemetry=False)
        elif self.role == OUTPUT and self.mode == PULL:
            server.add_route("GET", self.path, self._handle_get, telemetry=False)

    # -- output-port writer interface --

    def write(self, data: bytes) -> None:
        if self.role != OUTPUT:
            raise StreamIOError(f"port {self.name} is not an output port")
        self.pipe.write(data)

    def close(self) -> None:
        self.pipe.close_write()

    # -- run --

    def start(self, stop: StopToken) -> None:
        self._stop = stop
        watcher = threading.Thread(target=self._watch_stop, args=(stop,), daemon=True)
        watcher.start()
        try:
            if self.role == INPUT and self.mode == PUSH:
                self._run_input_listener()
            elif self.role == INPUT and self.mode == PULL:
                self._run_input_pull(stop)
            elif self.role == OUTPUT and self.mode == PUSH:
                self._run_output_push(stop)
            else:
                self._run_output_pull(stop)
        except Exception as e:
            self.error = e
            raise

    def _watch_stop(self, stop: StopToken) -> None:
        stop.wait()
        # graceful teardown: signal EOF first so in-flight bytes drain, then
        # break any writer still blocked on a reader that will never come
        self.pipe.close_write()
        time.sleep(0.25)
        self.pipe.close_read()
        response = self._response
        if response is not None:
            try:
                response.close()
            except Exception:
                pass

    # input-push: the registered handler accepts a single POST and forwards
    # the body into the pipe; the port thread drains the pipe downstream.
    def _run_input_listener(self) -> None:
        if self.connection is None:
            raise StreamIOError(f"input port {self.name} has no connection")
        self.connection.write_all_from(self.pipe, CHUNK_SIZE)
        self.connection.close()

    def _handle_post(self, request: Request) -> Response:
        with self._lock:
            if self._producer_taken:
                return Response.text(409, "stream already has a producer")
            self._producer_taken = True
        try:
            for chunk in request.iter_body():
                self.pipe.write(chunk)
        except StreamIOError as e:
            return Response.text(503, str(e))
        finally:
            self.pipe.close_write()
        return Response.text(200, "stream accepted")

    # input-pull: GET the configured URL and forward the response body.
    def _run_input_pull(self, stop: StopToken) -> None:
        if self.connection is None:
            raise StreamIOError(f"input port {self.name} has no connection")
        response = self._get_with_retries(stop)
        self._response = response
        try:
            for chunk in response.iter_content(CHUNK_SIZE):
                if stop.stopped:
                    break
                if chunk:
                    self.connection.write(chunk)
        except requests.RequestException as e:
            if not stop.stopped:
                raise PeerUnreachable(f"{self.url}: {e}") from e
        finally:
            response.close()
            self.connection.close()

    def _get_with_retries(self, stop: StopToken) -> requests.Response:
        last: Exception | None = None
        delay = self.retry_delay
        for _ in range(self.connect_retries):
            if stop.stopped:
                raise StreamIOError("cancelled")
            try:
                response = requests.get(self.url, headers=self.headers, stream=True, timeout=30)
                if response.status_code == 200:
                    return response
                response.close()
                last = PeerUnreachable(f"{self.url} answered {response.status_code}")
            except requests.RequestException as e:
                last = e
            stop.wait(timeout=delay)
            delay = min(delay * 2, 2.0)
        raise PeerUnreachable(f"{self.url}: {last}")

    # output-push: POST written bytes with chunked encoding.
    def _run_output_push(self, stop: StopToken) -> None:
        consumed_any = False

        def body() -> Iterator[bytes]:
            nonlocal consumed_any
            while True:
                chunk = self.pipe.read(CHUNK_SIZE)
                if not chunk:
                    return
                consumed_any = True
                yield chunk

        last: Exception | None = None
        delay = self.retry_delay
        for _ in range(self.connect_retries):
            if stop.stopped:
                return
            try:
                response = requests.post(self.url, data=body(), headers=self.headers, timeout=300)
                if response.status_code < 300:
                    return
                last = PeerUnreachable(f"{self.url} answered {response.status_code}")
            except requests.RequestException as e:
                last = e
            if consumed_any:
                # bytes were already sent; a retry would replay a partial stream
                break
            stop.wait(timeout=delay)
            delay = min(delay * 2, 2.0)
        if stop.stopped:
            return
        raise PeerUnreachable(f"{self.url}: {last}")

    # output-pull: written bytes block until a GET arrives, then stream out.
    def _run_output_pull(self, stop: StopToken) -> None:
        # the port thread only facilitates: the GET handler moves the bytes
        while not self._serve_done and not stop.stopped:
            stop.wait(timeout=0.05)

    def _handle_get(self, request: Request) -> Response:
        with self._lock:
            if self._serve_done:
                return Response.text(410, "stream already served")
            if self._get_active:
                return Response.text(409, "stream is being served")
            self._get_active = True

        def stream() -> Iterator[bytes]:
            try:
                while True:
                    chunk = self.pipe.read(CHUNK_SIZE)
                    if not chunk:
                        return
                    yield chunk
            finally:
                self._serve_done = True

        return Response(200, headers={"Content-Type": "application/octet-stream"}, body=stream())


def build_servers(ports: list) -> list["PortServer"]:
    """Shared servers for all listener ports; duplicate (host, port, path)
    registrations conflict at startup."""
    servers: dict[tuple[str, int], PortServer] = {}
    seen: dict[tuple[str, int, str], str] = {}
    for port in ports:
        spec = port.listener_spec() if hasattr(port, "listener_spec") else None
        if spec is None:
            continue
        host, net_port, path = spec
        key = (host, net_port, path)
        if key in seen:
            raise ListenerConflict(
                f"ports {seen[key]!r} and {port.name!r} both want {host}:{net_port}{path}")
        seen[key] = port.name
        server = servers.get((host, net_port))
        if server is None:
            server = PortServer(host, net_port)
            servers[(host, net_port)] = server
        port.register_routes(server.http)
    return list(servers.values())


class PortServer:
    """One HTTP listener shared by the ports mounted on it."""

    def __init__(self, host: str, port: int):
        self.http = HttpServer(WebserverConfig(bind_address=f"{host}:{port}"), name=f"portsrv:{host}:{port}")
        self.address = f"{host}:{port}"

    def bind(self) -> None:
        self.http.bind()

    def start(self, stop: StopToken) -> None:
        self.http.start(stop)

    @property
    def port(self) -> int:
        return self.http.port
