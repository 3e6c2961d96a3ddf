"""script-lua: embedded-script self-adaptation host.

Executes a user-given Lua script with the host environment preloaded: the
whitelisted language modules plus json, nbmp and nme. No require statements
are needed; io and os are deliberately absent.

    json.parse(text)              JSON string to a Lua value
    nme.log(msg) / nme.logerr(msg)
    nme.sleep("2m")               duration strings, cooperative with stop
    nme.get_input_port(name)      handle: read([max]) -> string|nil, close()
    nme.get_output_port(name)     handle: write(string), close()
    nbmp.Workflow.self()          fetch the owning workflow over the API

Workflow handles navigate the WDD (get_task/get_input/get_output), mutate the
in-memory connection map via add_connection/remove_connection, and persist
with update(), which sends a PATCH to the workflow API. Scripts must set the
workflowAPIURL configuration option; the owning workflow id arrives in the
nme-workflow-id configuration key.
"""

from __future__ import annotations

import json as _json
import logging

from mediaengine import nbmp
from mediaengine.convert import CONFIG_KEY_WORKFLOW_ID
from mediaengine.functions import FunctionContext, FunctionError, assemble_io, register
from mediaengine.functions import luainterp as lua
from mediaengine.functions.luainterp import LuaError, LuaTable, lua_tostring
from mediaengine.nbmpclient import NbmpRequestError, WorkflowClient
from mediaengine.runtime import BadDuration, StopToken, parse_duration
from mediaengine.streamio import Connection, RingBuffer

logger = logging.getLogger("mediaengine.functions.script")

PORT_BUFFER_CAPACITY = 10 * 1024 * 1024


class ScriptError(FunctionError):
    pass


class WorkflowAPIUnreachable(FunctionError):
    pass


# -- port handles ---------------------------------------------------------------


class _InputHandle:
    """Script-side reader over an input port, decoupled by a ring buffer."""

    def __init__(self, port):
        self.buffer = RingBuffer(PORT_BUFFER_CAPACITY)
        port.connect(Connection(_RingSink(self.buffer)))

    def read(self, max_bytes: float | None = None) -> str | None:
        n = int(max_bytes) if max_bytes else 64 * 1024
        data = self.buffer.read(n)
        if not data:
            return None
        return data.decode("latin-1")

    def close(self):
        self.buffer.close_read()


class _RingSink:
    def __init__(self, buffer: RingBuffer):
        self.buffer = buffer

    def write(self, data: bytes) -> None:
        self.buffer.write(data)

    def close(self) -> None:
        self.buffer.close_write()


class _OutputHandle:
    def __init__(self, stream):
        self.stream = stream

    def write(self, text) -> None:
        if not isinstance(text, str):
            text = lua_tostring(text)
        self.stream.write(text.encode("latin-1"))

    def close(self) -> None:
        self.stream.close()


def _port_table(handle) -> LuaTable:
    # methods are written for colon-call syntax: port:read(n), port:write(s)
    table = LuaTable()
    if isinstance(handle, _InputHandle):
        table.set("read", lambda self=None, max_bytes=None: handle.read(max_bytes))
    else:
        table.set("write", lambda self=None, text=None: handle.write(text if text is not None else ""))
    table.set("close", lambda self=None: handle.close())
    return table


# -- nbmp module -------------------------------------------------------------------


class WorkflowHandle:
    """In-memory WDD with adaptation methods, persisted via update()."""

    def __init__(self, client: WorkflowClient, wdd: nbmp.Description):
        self.client = client
        self.wdd = wdd

    # navigation

    def get_task(self, task_id: str):
        for restriction in self.wdd.processing.function_restrictions:
            if restriction.instance == task_id:
                return {"kind": "task", "id": task_id}
        return None

    def get_input(self, stream_id: str):
        if self.wdd.input.find(stream_id) is not None:
            return {"kind": "input", "id": stream_id}
        return None

    def get_output(self, stream_id: str):
        if self.wdd.output.find(stream_id) is not None:
            return {"kind": "output", "id": stream_id}
        return None

    # adaptation

    def add_connection(self, from_end: dict, to_end: dict) -> None:
        connection = nbmp.Connection(
            from_=self._end(from_end, is_source=True),
            to=self._end(to_end, is_source=False),
        )
        self.wdd.processing.connection_map.append(connection)

    def remove_connection(self, from_end: dict, to_end: dict) -> bool:
        wanted_from = self._end(from_end, is_source=True)
        wanted_to = self._end(to_end, is_source=False)
        for i, c in enumerate(self.wdd.processing.connection_map):
            if (c.from_.id, c.from_.port_name) == (wanted_from.id, wanted_from.port_name) \
                    and (c.to.id, c.to.port_name) == (wanted_to.id, wanted_to.port_name):
                del self.wdd.processing.connection_map[i]
                return True
        return False

    @staticmethod
    def _end(end: dict, is_source: bool) -> nbmp.ConnectionEnd:
        if end.get("kind") in ("input", "output"):
            return nbmp.ConnectionEnd(id=end["id"])
        return nbmp.ConnectionEnd(id=end["id"], port_name=end.get("port", ""))

    def update(self) -> None:
        try:
            refreshed = self.client.update(self.wdd, method="PATCH")
        except NbmpRequestError as e:
            raise WorkflowAPIUnreachable(f"workflow update failed: {e}") from e
        if refreshed is not None:
            self.wdd = refreshed


def _task_port_table(task_id: str) -> LuaTable:
    """Lua handle for a task: output(name)/input(name) return port endpoints."""
    table = LuaTable({"id": task_id})
    table.set("output", lambda self=None, name=None: LuaTable(
        {"kind": "task", "id": task_id, "port": name}))
    table.set("input", lambda self=None, name=None: LuaTable(
        {"kind": "task", "id": task_id, "port": name}))
    return table


def _stream_table(kind: str, stream_id: str) -> LuaTable:
    table = LuaTable({"kind": kind, "id": stream_id})
    table.set("port", lambda self=None: table)
    return table


def _workflow_table(handle: WorkflowHandle) -> LuaTable:
    table = LuaTable()

    def get_task(self=None, task_id=None):
        found = handle.get_task(task_id)
        return _task_port_table(task_id) if found else None

    def get_input(self=None, stream_id=None):
        return _stream_table("input", stream_id) if handle.get_input(stream_id) else None

    def get_output(self=None, stream_id=None):
        return _stream_table("output", stream_id) if handle.get_output(stream_id) else None

    def lua_end(value) -> dict:
        if not isinstance(value, LuaTable):
            raise LuaError("connection endpoints must be port handles")
        return {
            "kind": value.get("kind") or "task",
            "id": value.get("id"),
            "port": value.get("port") or "",
        }

    def add_connection(self=None, a=None, b=None):
        handle.add_connection(lua_end(a), lua_end(b))

    def remove_connection(self=None, a=None, b=None):
        return handle.remove_connection(lua_end(a), lua_end(b))

    def update(self=None):
        handle.update()

    table.set("get_task", get_task)
    table.set("get_input", get_input)
    table.set("get_output", get_output)
    table.set("add_connection", add_connection)
    table.set("remove_connection", remove_connection)
    table.set("update", update)
    table.set("id", handle.wdd.general.id)
    return table


# -- the function -------------------------------------------------------------------


@register("script-lua")
def script_lua(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    config = tdd.configuration
    source = config.get("script", "")
    if not source:
        raise ScriptError("configuration key 'script' is required")
    workflow_api_url = config.get("workflowAPIURL", "")
    workflow_id = config.get(CONFIG_KEY_WORKFLOW_ID, "")

    io = assemble_io(tdd, inputs_critical=False)
    input_handles: dict[str, _InputHandle] = {}
    for port, _ in io.inputs:
        input_handles[port.name] = _InputHandle(port)
    output_handles: dict[str, _OutputHandle] = {}
    for base, stream in io.output_groups.items():
        output_handles[base] = _OutputHandle(stream)

    script_failure: list[Exception] = []

    def run_script(stop: StopToken) -> None:
        env = lua.baseline_env(print_fn=lambda text: ctx.log.info("script: %s", text))
        env["json"] = lua.make_table({
            "parse": lambda text=None: _json_parse(text),
        })
        env["nme"] = lua.make_table({
            "log": lambda *args: ctx.log.info("script: %s", " ".join(lua_tostring(a) for a in args)),
            "logerr": lambda *args: ctx.log.error("script: %s", " ".join(lua_tostring(a) for a in args)),
            "sleep": lambda duration=None: _nme_sleep(duration, stop),
            "get_input_port": lambda name=None: _get_port(input_handles, name),
            "get_output_port": lambda name=None: _get_port(output_handles, name),
        })
        env["nbmp"] = lua.make_table({
            "Workflow": lua.make_table({
                "self": lambda *_: _workflow_self(workflow_api_url, workflow_id),
            }),
        })
        env["channel"] = lua.make_table({"make": _channel_make})  # experimental
        interp = lua.Interpreter(env, interrupt=lambda: stop.stopped)
        try:
            interp.run(source)
        except lua.ScriptInterrupted:
            pass
        except LuaError as e:
            script_failure.append(ScriptError(str(e)))
        except FunctionError as e:
            script_failure.append(e)
        finally:
            for handle in output_handles.values():
                try:
                    handle.close()
                except Exception:
                    pass

    def _get_port(handles: dict, name):
        if name is None:
            return None
        handle = handles.get(name)
        if handle is None and isinstance(name, str) and "." not in name:
            # fan-out groups register under the base name only
            handle = handles.get(name.split(".", 1)[0])
        if handle is None:
            return None
        return _port_table(handle)

    def _workflow_self(api_url: str, wf_id: str) -> LuaTable:
        if not api_url:
            raise LuaError("workflowAPIURL is not configured")
        if not wf_id:
            raise LuaError("the workflow id is not configured (nme-workflow-id)")
        client = WorkflowClient(api_url)
        try:
            wdd = client.retrieve(wf_id)
        except NbmpRequestError as e:
            raise LuaError(f"workflow API unreachable: {e}") from e
        return _workflow_table(WorkflowHandle(client, wdd))

    io.manager.add_member("script", run_script, critical=True)
    io.manager.run(ctx.stop)
    if script_failure:
        raise script_failure[0]
    errors = {k: v for k, v in io.manager.errors.items() if k != "script"}
    if errors:
        raise FunctionError("; ".join(f"{k}: {v}" for k, v in errors.items()))


def _json_parse(text):
    if not isinstance(text, str):
        raise LuaError("json.parse expects a string")
    try:
        return lua.python_to_lua(_json.loads(text))
    except ValueError as e:
        raise LuaError(f"invalid JSON: {e}") from e


def _channel_make(capacity=None):
    """Minimal channel: send/receive/close over a queue. Experimental."""
    import queue as _queue

    q: _queue.Queue = _queue.Queue(maxsize=int(capacity or 0))
    closed = {"value": False}
    table = LuaTable()

    def send(self=None, value=None):
        if closed["value"]:
            raise LuaError("send on closed channel")
        q.put(value)

    def receive(self=None, timeout=None):
        try:
            value = q.get(timeout=float(timeout) if timeout is not None else None)
        except _queue.Empty:
            return (False, None)
        if value is _CHANNEL_CLOSED:
            q.put(_CHANNEL_CLOSED)  # keep signalling later receivers
            return (False, None)
        return (True, value)

    def close(self=None):
        closed["value"] = True
        q.put(_CHANNEL_CLOSED)

    table.set("send", send)
    table.set("receive", receive)
    table.set("close", close)
    return table


_CHANNEL_CLOSED = object()


def _nme_sleep(duration, stop: StopToken) -> None:
    if duration is None:
        raise LuaError("nme.sleep needs a duration string")
    try:
        seconds = parse_duration(duration if isinstance(duration, str) else float(duration))
    except BadDuration as e:
        raise LuaError(str(e)) from e
    if stop.wait(timeout=seconds):
        raise lua.ScriptInterrupted()
