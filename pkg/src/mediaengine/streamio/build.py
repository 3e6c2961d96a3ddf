"""Port construction from TDD stream descriptors."""

from __future__ import annotations

from urllib.parse import urlsplit

from mediaengine import nbmp
from mediaengine.streamio import MalformedURL, UnknownProtocol
from mediaengine.streamio.buffered import BufferedPort, split_buffered_url
from mediaengine.streamio.httpport import INPUT, OUTPUT, HttpPort


def build_port(name: str, role: str, mode: str, url: str):
    """Construct a port for a registered protocol (http, https, buffered)."""
    if not url:
        raise MalformedURL(f"port {name!r} has no stream URL")
    scheme = urlsplit(url).scheme
    if scheme in ("http", "https"):
        return HttpPort(name, role, mode, url)
    if scheme == "buffered":
        protocol, inner_url, capacity = split_buffered_url(url)
        if protocol not in ("http", "https"):
            raise UnknownProtocol(f"buffered wraps unknown protocol {protocol!r}")
        return BufferedPort(HttpPort(name, role, mode, inner_url), capacity=capacity)
    raise UnknownProtocol(f"{scheme!r} is not a registered port protocol")


def ports_from_tdd(tdd: nbmp.Description):
    """Build all input ports and output ports described by a TDD.

    Returns (inputs, outputs): lists of (port object, stream parameters).
    """
    inputs = []
    outputs = []
    for role, bindings, descriptor, sink in (
        (INPUT, tdd.general.input_ports, tdd.input, inputs),
        (OUTPUT, tdd.general.output_ports, tdd.output, outputs),
    ):
        for binding in bindings:
            params = descriptor.find(binding.stream_id)
            if params is None:
                raise MalformedURL(f"port {binding.port_name!r} binds undeclared stream {binding.stream_id!r}")
            port = build_port(binding.port_name, role, params.mode or nbmp.MODE_PUSH, params.caching_server_url)
            sink.append((port, params))
    return inputs, outputs
