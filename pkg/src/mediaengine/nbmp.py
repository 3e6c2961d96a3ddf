"""NBMP description documents.

Workflow and task description documents (WDD/TDD) as JSON, their defaulting
and lax validation, the lifecycle state enumeration and the acknowledge
response shape. Field names follow the revised second-edition JSON schema
(kebab-case keys); unknown fields are preserved verbatim on every object so
they can be enumerated in acknowledge reports and survive round-trips.

Violations are data, not exceptions: the gateway aggregates them into one
NBMP error response.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

WDD = "wdd"
TDD = "tdd"

# lifecycle states
INSTANTIATED = "instantiated"
IDLE = "idle"
RUNNING = "running"
ERROR = "error"
DESTROYED = "destroyed"
STATES = {INSTANTIATED, IDLE, RUNNING, ERROR, DESTROYED}

MODE_PUSH = "push"
MODE_PULL = "pull"

ACK_OK = "fulfilled"
ACK_FAILED = "failed"
ACK_PARTIAL = "partially-fulfilled"


class NbmpError(Exception):
    pass


class MalformedJson(NbmpError):
    pass


class SchemaViolation(NbmpError):
    def __init__(self, violations: list["Violation"]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def _take(obj: dict, known: list[str]) -> dict:
    """Split unknown keys off a JSON object, preserving them for later."""
    return {k: obj[k] for k in obj if k not in known}


def _require(obj: Any, path: str, typ: type, type_name: str) -> None:
    if not isinstance(obj, typ):
        raise SchemaViolation([Violation(path, f"expected {type_name}")])


def _check_uint(value: Any, path: str) -> None:
    if value is None:
        return
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise SchemaViolation([Violation(path, "expected a non-negative integer")])


@dataclass
class PortBinding:
    port_name: str
    stream_id: str
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "PortBinding":
        _require(obj, path, dict, "object")
        bind = obj.get("bind") or {}
        _require(bind, path + ".bind", dict, "object")
        return cls(
            port_name=obj.get("port-name", ""),
            stream_id=bind.get("stream-id", ""),
            extra=_take(obj, ["port-name", "bind"]),
        )

    def to_json(self) -> dict:
        out = {"port-name": self.port_name, "bind": {"stream-id": self.stream_id}}
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class StreamParameters:
    """One media- or metadata-stream parameter set."""

    stream_id: str
    name: str = ""
    mime_type: str = ""
    codec_type: str = ""
    protocol: str = ""
    mode: str = ""  # push | pull, defaulted to push
    bitrate: int | None = None
    caching_server_url: str = ""
    extra: dict = field(default_factory=dict)

    KNOWN = ["stream-id", "name", "mime-type", "codec-type", "protocol", "mode", "bitrate", "caching-server-url"]

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "StreamParameters":
        _require(obj, path, dict, "object")
        _check_uint(obj.get("bitrate"), path + ".bitrate")
        mode = obj.get("mode", "")
        if mode and mode not in (MODE_PUSH, MODE_PULL):
            raise SchemaViolation([Violation(path + ".mode", f"unknown mode {mode!r}")])
        return cls(
            stream_id=obj.get("stream-id", ""),
            name=obj.get("name", ""),
            mime_type=obj.get("mime-type", ""),
            codec_type=obj.get("codec-type", ""),
            protocol=obj.get("protocol", ""),
            mode=mode,
            bitrate=obj.get("bitrate"),
            caching_server_url=obj.get("caching-server-url", ""),
            extra=_take(obj, cls.KNOWN),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {"stream-id": self.stream_id}
        if self.name:
            out["name"] = self.name
        if self.mime_type:
            out["mime-type"] = self.mime_type
        if self.codec_type:
            out["codec-type"] = self.codec_type
        if self.protocol:
            out["protocol"] = self.protocol
        if self.mode:
            out["mode"] = self.mode
        if self.bitrate is not None:
            out["bitrate"] = self.bitrate
        if self.caching_server_url:
            out["caching-server-url"] = self.caching_server_url
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class IoDescriptor:
    media_parameters: list[StreamParameters] = field(default_factory=list)
    metadata_parameters: list[StreamParameters] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "IoDescriptor":
        _require(obj, path, dict, "object")
        media = obj.get("media-parameters", [])
        metadata = obj.get("metadata-parameters", [])
        _require(media, path + ".media-parameters", list, "array")
        _require(metadata, path + ".metadata-parameters", list, "array")
        return cls(
            media_parameters=[StreamParameters.from_json(m, f"{path}.media-parameters[{i}]") for i, m in enumerate(media)],
            metadata_parameters=[StreamParameters.from_json(m, f"{path}.metadata-parameters[{i}]") for i, m in enumerate(metadata)],
            extra=_take(obj, ["media-parameters", "metadata-parameters"]),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        if self.media_parameters:
            out["media-parameters"] = [m.to_json() for m in self.media_parameters]
        if self.metadata_parameters:
            out["metadata-parameters"] = [m.to_json() for m in self.metadata_parameters]
        out.update(sorted(self.extra.items()))
        return out

    def all_parameters(self) -> list[StreamParameters]:
        return self.media_parameters + self.metadata_parameters

    def find(self, stream_id: str) -> StreamParameters | None:
        for p in self.all_parameters():
            if p.stream_id == stream_id:
                return p
        return None


@dataclass
class General:
    id: str
    name: str = ""
    description: str = ""
    state: str = ""
    input_ports: list[PortBinding] = field(default_factory=list)
    output_ports: list[PortBinding] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    KNOWN = ["id", "name", "description", "state", "input-ports", "output-ports"]

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "General":
        _require(obj, path, dict, "object")
        state = obj.get("state", "")
        if state and state not in STATES:
            raise SchemaViolation([Violation(path + ".state", f"unknown state {state!r}")])
        inp = obj.get("input-ports", [])
        outp = obj.get("output-ports", [])
        _require(inp, path + ".input-ports", list, "array")
        _require(outp, path + ".output-ports", list, "array")
        return cls(
            id=obj.get("id", ""),
            name=obj.get("name", ""),
            description=obj.get("description", ""),
            state=state,
            input_ports=[PortBinding.from_json(p, f"{path}.input-ports[{i}]") for i, p in enumerate(inp)],
            output_ports=[PortBinding.from_json(p, f"{path}.output-ports[{i}]") for i, p in enumerate(outp)],
            extra=_take(obj, cls.KNOWN),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {"id": self.id}
        if self.name:
            out["name"] = self.name
        if self.description:
            out["description"] = self.description
        if self.state:
            out["state"] = self.state
        if self.input_ports:
            out["input-ports"] = [p.to_json() for p in self.input_ports]
        if self.output_ports:
            out["output-ports"] = [p.to_json() for p in self.output_ports]
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class ConnectionEnd:
    id: str  # task instance id, or declared workflow stream id
    port_name: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "ConnectionEnd":
        _require(obj, path, dict, "object")
        return cls(id=obj.get("id", ""), port_name=obj.get("port-name", ""), extra=_take(obj, ["id", "port-name"]))

    def to_json(self) -> dict:
        out: dict[str, Any] = {"id": self.id}
        if self.port_name:
            out["port-name"] = self.port_name
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class Connection:
    from_: ConnectionEnd
    to: ConnectionEnd
    connection_id: str = ""
    mode: str = ""  # optional push/pull override for task-to-task edges
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "Connection":
        _require(obj, path, dict, "object")
        if "from" not in obj or "to" not in obj:
            raise SchemaViolation([Violation(path, "connection requires from and to")])
        mode = obj.get("mode", "")
        if mode and mode not in (MODE_PUSH, MODE_PULL):
            raise SchemaViolation([Violation(path + ".mode", f"unknown mode {mode!r}")])
        return cls(
            from_=ConnectionEnd.from_json(obj["from"], path + ".from"),
            to=ConnectionEnd.from_json(obj["to"], path + ".to"),
            connection_id=obj.get("connection-id", ""),
            mode=mode,
            extra=_take(obj, ["connection-id", "from", "to", "mode"]),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        if self.connection_id:
            out["connection-id"] = self.connection_id
        out["from"] = self.from_.to_json()
        out["to"] = self.to.to_json()
        if self.mode:
            out["mode"] = self.mode
        out.update(sorted(self.extra.items()))
        return out


def parameters_to_config(obj: dict | None, path: str) -> dict[str, str]:
    """NBMP configuration parameters ({name, values}) to a string map."""
    if not obj:
        return {}
    _require(obj, path, dict, "object")
    params = obj.get("parameters", [])
    _require(params, path + ".parameters", list, "array")
    out: dict[str, str] = {}
    for i, p in enumerate(params):
        _require(p, f"{path}.parameters[{i}]", dict, "object")
        name = p.get("name", "")
        values = p.get("values", [])
        if not isinstance(values, list):
            values = [values]
        out[name] = "" if not values else str(values[0])
    return out


def config_to_parameters(config: dict[str, str]) -> dict:
    return {"parameters": [{"name": k, "values": [v]} for k, v in sorted(config.items())]}


@dataclass
class FunctionRestriction:
    """One processing entry of a WDD: a task instance with its function."""

    instance: str
    function: str = ""  # referenced function name
    config: dict[str, str] = field(default_factory=dict)
    general_extra: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "FunctionRestriction":
        _require(obj, path, dict, "object")
        general = obj.get("general") or {}
        _require(general, path + ".general", dict, "object")
        return cls(
            instance=obj.get("instance", ""),
            function=general.get("id", ""),
            config=parameters_to_config(obj.get("configuration"), path + ".configuration"),
            general_extra=_take(general, ["id"]),
            extra=_take(obj, ["instance", "general", "configuration"]),
        )

    def to_json(self) -> dict:
        general: dict[str, Any] = {"id": self.function}
        general.update(sorted(self.general_extra.items()))
        out: dict[str, Any] = {"instance": self.instance, "general": general}
        if self.config:
            out["configuration"] = config_to_parameters(self.config)
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class Processing:
    connection_map: list[Connection] = field(default_factory=list)
    function_restrictions: list[FunctionRestriction] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "Processing":
        _require(obj, path, dict, "object")
        cmap = obj.get("connection-map", [])
        restrictions = obj.get("function-restrictions", [])
        _require(cmap, path + ".connection-map", list, "array")
        _require(restrictions, path + ".function-restrictions", list, "array")
        return cls(
            connection_map=[Connection.from_json(c, f"{path}.connection-map[{i}]") for i, c in enumerate(cmap)],
            function_restrictions=[
                FunctionRestriction.from_json(r, f"{path}.function-restrictions[{i}]") for i, r in enumerate(restrictions)
            ],
            extra=_take(obj, ["connection-map", "function-restrictions"]),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        if self.connection_map:
            out["connection-map"] = [c.to_json() for c in self.connection_map]
        if self.function_restrictions:
            out["function-restrictions"] = [r.to_json() for r in self.function_restrictions]
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class Reporting:
    url: str = ""
    report_type: str = ""
    delivery_method: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "Reporting":
        _require(obj, path, dict, "object")
        return cls(
            url=obj.get("url", ""),
            report_type=obj.get("report-type", ""),
            delivery_method=obj.get("delivery-method", ""),
            extra=_take(obj, ["url", "report-type", "delivery-method"]),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        if self.report_type:
            out["report-type"] = self.report_type
        if self.url:
            out["url"] = self.url
        if self.delivery_method:
            out["delivery-method"] = self.delivery_method
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class Acknowledge:
    status: str = ""
    unsupported: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    partially_supported: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, path: str) -> "Acknowledge":
        _require(obj, path, dict, "object")
        return cls(
            status=obj.get("status", ""),
            unsupported=list(obj.get("unsupported", [])),
            failed=list(obj.get("failed", [])),
            partially_supported=list(obj.get("partially-supported", [])),
            extra=_take(obj, ["status", "unsupported", "failed", "partially-supported"]),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {"status": self.status}
        if self.unsupported:
            out["unsupported"] = list(self.unsupported)
        if self.failed:
            out["failed"] = list(self.failed)
        if self.partially_supported:
            out["partially-supported"] = list(self.partially_supported)
        out.update(sorted(self.extra.items()))
        return out


@dataclass
class Description:
    """A parsed WDD or TDD."""

    document_kind: str  # wdd | tdd
    general: General
    input: IoDescriptor = field(default_factory=IoDescriptor)
    output: IoDescriptor = field(default_factory=IoDescriptor)
    processing: Processing = field(default_factory=Processing)
    configuration: dict[str, str] = field(default_factory=dict)  # TDD task config
    requirement: dict | None = None
    repository: dict | None = None
    reporting: Reporting | None = None
    acknowledge: Acknowledge | None = None
    extra: dict = field(default_factory=dict)

    KNOWN = ["scheme", "general", "input", "output", "processing", "requirement",
             "configuration", "repository", "reporting", "acknowledge"]

    def to_json(self) -> dict:
        out: dict[str, Any] = {"general": self.general.to_json()}
        inp = self.input.to_json()
        if inp:
            out["input"] = inp
        outp = self.output.to_json()
        if outp:
            out["output"] = outp
        proc = self.processing.to_json()
        if proc:
            out["processing"] = proc
        if self.requirement is not None:
            out["requirement"] = self.requirement
        if self.configuration:
            out["configuration"] = config_to_parameters(self.configuration)
        if self.repository is not None:
            out["repository"] = self.repository
        if self.reporting is not None:
            rep = self.reporting.to_json()
            if rep:
                out["reporting"] = rep
        if self.acknowledge is not None:
            out["acknowledge"] = self.acknowledge.to_json()
        out.update(sorted(self.extra.items()))
        return out

    def serialize(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":"), sort_keys=False).encode()

    def unknown_field_paths(self) -> list[str]:
        """Paths of all preserved unknown fields, for acknowledge reporting."""
        paths = [k for k in sorted(self.extra)]
        paths += [f"general.{k}" for k in sorted(self.general.extra)]
        for io_name, io in (("input", self.input), ("output", self.output)):
            paths += [f"{io_name}.{k}" for k in sorted(io.extra)]
            for i, p in enumerate(io.media_parameters):
                paths += [f"{io_name}.media-parameters[{i}].{k}" for k in sorted(p.extra)]
            for i, p in enumerate(io.metadata_parameters):
                paths += [f"{io_name}.metadata-parameters[{i}].{k}" for k in sorted(p.extra)]
        paths += [f"processing.{k}" for k in sorted(self.processing.extra)]
        return paths


def parse_document(data: bytes | str, kind: str) -> Description:
    """Parse a WDD or TDD from JSON bytes.

    Unknown fields are preserved; numbers outside their allowed range are
    rejected with a SchemaViolation carrying the offending path.
    """
    if kind not in (WDD, TDD):
        raise ValueError(f"kind must be {WDD!r} or {TDD!r}")
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedJson(str(e)) from e
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as e:
        raise MalformedJson(str(e)) from e
    if not isinstance(obj, dict):
        raise SchemaViolation([Violation("$", "document must be a JSON object")])
    if "general" not in obj:
        raise SchemaViolation([Violation("$", "missing general descriptor")])
    description = Description(
        document_kind=kind,
        general=General.from_json(obj["general"], "general"),
        extra=_take(obj, Description.KNOWN),
    )
    if "input" in obj:
        description.input = IoDescriptor.from_json(obj["input"], "input")
    if "output" in obj:
        description.output = IoDescriptor.from_json(obj["output"], "output")
    if "processing" in obj:
        description.processing = Processing.from_json(obj["processing"], "processing")
    if "configuration" in obj:
        description.configuration = parameters_to_config(obj["configuration"], "configuration")
    if "requirement" in obj:
        _require(obj["requirement"], "requirement", dict, "object")
        description.requirement = obj["requirement"]
    if "repository" in obj:
        _require(obj["repository"], "repository", dict, "object")
        description.repository = obj["repository"]
    if "reporting" in obj:
        description.reporting = Reporting.from_json(obj["reporting"], "reporting")
    if "acknowledge" in obj:
        description.acknowledge = Acknowledge.from_json(obj["acknowledge"], "acknowledge")
    return description


def default_description(d: Description) -> Description:
    """Fill standard defaults in place: initial lifecycle state and push mode
    for streams. Idempotent."""
    if not d.general.state:
        d.general.state = INSTANTIATED
    for io in (d.input, d.output):
        for p in io.all_parameters():
            if not p.mode:
                p.mode = MODE_PUSH
    return d


def validate_lax(d: Description) -> list[Violation]:
    """Structural and referential checks only; no semantic scheduling checks.

    Deviations deliberately forgiven here: absent optional descriptors, empty
    stream metadata, unknown (preserved) fields and missing protocol fields.
    """
    violations: list[Violation] = []
    stream_paths: dict[str, list[str]] = {}
    for io_name, io in (("input", d.input), ("output", d.output)):
        for list_name, params in (("media-parameters", io.media_parameters), ("metadata-parameters", io.metadata_parameters)):
            for i, p in enumerate(params):
                path = f"{io_name}.{list_name}[{i}]"
                if not p.stream_id:
                    violations.append(Violation(path + ".stream-id", "stream-id must not be empty"))
                stream_paths.setdefault(p.stream_id, []).append(path)
    for stream_id, paths in stream_paths.items():
        if stream_id and len(paths) > 1:
            violations.append(Violation(" and ".join(paths), f"duplicate stream id {stream_id!r}"))

    input_ids = {p.stream_id for p in d.input.all_parameters()}
    output_ids = {p.stream_id for p in d.output.all_parameters()}

    for ports, path_prefix in ((d.general.input_ports, "general.input-ports"), (d.general.output_ports, "general.output-ports")):
        for i, binding in enumerate(ports):
            if binding.stream_id and binding.stream_id not in input_ids | output_ids:
                violations.append(Violation(f"{path_prefix}[{i}].bind.stream-id",
                                            f"references undeclared stream {binding.stream_id!r}"))

    if d.document_kind == WDD:
        instances: dict[str, int] = {}
        for i, r in enumerate(d.processing.function_restrictions):
            path = f"processing.function-restrictions[{i}]"
            if not r.instance:
                violations.append(Violation(path + ".instance", "instance must not be empty"))
            if not r.function:
                violations.append(Violation(path + ".general.id", "function reference must not be empty"))
            if r.instance in instances:
                violations.append(Violation(path + ".instance", f"duplicate instance {r.instance!r}"))
            instances[r.instance] = i
        edges: list[tuple[str, str]] = []
        for i, c in enumerate(d.processing.connection_map):
            path = f"processing.connection-map[{i}]"
            from_task = c.from_.id in instances
            to_task = c.to.id in instances
            if not from_task and c.from_.id not in input_ids:
                violations.append(Violation(path + ".from.id",
                                            f"{c.from_.id!r} is neither a task instance nor a declared input stream"))
            if not to_task and c.to.id not in output_ids:
                violations.append(Violation(path + ".to.id",
                                            f"{c.to.id!r} is neither a task instance nor a declared output stream"))
            if from_task and not c.from_.port_name:
                violations.append(Violation(path + ".from.port-name", "port-name required for task endpoints"))
            if to_task and not c.to.port_name:
                violations.append(Violation(path + ".to.port-name", "port-name required for task endpoints"))
            if from_task and to_task:
                edges.append((c.from_.id, c.to.id))
        cycle = _find_cycle(instances.keys(), edges)
        if cycle:
            violations.append(Violation("processing.connection-map",
                                        "graph must be acyclic, found cycle " + " -> ".join(cycle)))
    return violations


def _find_cycle(nodes, edges: list[tuple[str, str]]) -> list[str] | None:
    adjacency: dict[str, list[str]] = {n: [] for n in nodes}
    for a, b in edges:
        adjacency.setdefault(a, []).append(b)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in adjacency}
    stack: list[str] = []

    def visit(n: str) -> list[str] | None:
        color[n] = GRAY
        stack.append(n)
        for m in adjacency.get(n, []):
            if color.get(m) == GRAY:
                return stack[stack.index(m):] + [m]
            if color.get(m) == WHITE:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        color[n] = BLACK
        return None

    for n in list(adjacency):
        if color[n] == WHITE:
            found = visit(n)
            if found:
                return found
    return None


# legal lifecycle edges: forward progress, error recovery to any earlier
# state, and destruction from anywhere; destroyed is terminal
_TRANSITIONS = {
    INSTANTIATED: {IDLE, ERROR, DESTROYED},
    IDLE: {RUNNING, ERROR, DESTROYED},
    RUNNING: {ERROR, DESTROYED},
    ERROR: {INSTANTIATED, IDLE, RUNNING, DESTROYED},
    DESTROYED: set(),
}


def check_transition(from_state: str, to_state: str) -> bool:
    if from_state not in STATES or to_state not in STATES:
        return False
    if from_state == to_state:
        return True
    return to_state in _TRANSITIONS[from_state]


def make_acknowledge(status: str, unsupported: list[str] | None = None,
                     failed: list[str] | None = None,
                     partially_supported: list[str] | None = None) -> Acknowledge:
    return Acknowledge(status=status, unsupported=unsupported or [], failed=failed or [],
                       partially_supported=partially_supported or [])
