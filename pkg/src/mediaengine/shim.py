"""Task shim: server-side NBMP task API adapter for one task.

Serves create/retrieve/update/delete for a single task, executes the
configured action lists (meta, file, exec) with template rendering against the
current (and, on updates, previous) TDD, supervises the wrapped function as a
subprocess tree and reports generic lifecycle events when the TDD carries a
reporting descriptor.

Lifecycle contract: the task can be created exactly once; an absent create
request within the create timeout, or an absent delete request within the
delete timeout after the function terminated, makes the shim exit nonzero
(the NBMP client side is then considered faulty).
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shlex
import signal
import subprocess
import threading
import uuid
from dataclasses import dataclass, field
from typing import Any

import yaml

from mediaengine import events as eventsmod
from mediaengine import nbmp, template
from mediaengine.config import KIND_TASK_SHIM, register_config_kind, webserver_from_dict, InvalidConfig, duration_field
from mediaengine.httpkit import HttpServer, Request, Response, WebserverConfig
from mediaengine.runtime import StopToken

logger = logging.getLogger("mediaengine.shim")

TASKS_PATH = "/v2/tasks"

EVENT_SOURCE = "/nagare-media-engine/task-shim"
EVENT_TYPE_PREFIX = "media.nagare.engine.task."

META_START = "start-task"
META_STOP = "stop-task"
META_RESTART = "restart-task"

# function outcomes
OUTCOME_NONE = ""
OUTCOME_SUCCEEDED = "succeeded"
OUTCOME_FAILED = "failed"
OUTCOME_STOPPED = "stopped"


class ActionError(Exception):
    pass


class SpawnFailed(ActionError):
    pass


class NonZeroExit(ActionError):
    pass


class AlreadyRunning(ActionError):
    pass


@dataclass
class ActionSpec:
    name: str
    action: str
    config: Any = None  # string template or object


@dataclass
class TaskShimConfig:
    webserver: WebserverConfig = field(default_factory=lambda: WebserverConfig(bind_address="127.0.0.1:8888"))
    actions: list[ActionSpec] = field(default_factory=list)
    on_create_actions: list[ActionSpec] = field(default_factory=lambda: [ActionSpec("start function", "meta", META_START)])
    on_update_actions: list[ActionSpec] = field(default_factory=lambda: [ActionSpec("restart function", "meta", META_RESTART)])
    on_delete_actions: list[ActionSpec] = field(default_factory=lambda: [ActionSpec("stop function", "meta", META_STOP)])
    create_timeout: float = 60.0
    delete_timeout: float = 60.0


def _decode_actions(items: Any, path: str, errors: list[str]) -> list[ActionSpec]:
    specs = []
    for i, item in enumerate(items or []):
        if not isinstance(item, dict) or not item.get("name") or not item.get("action"):
            errors.append(f"{path}[{i}]: each action needs name and action")
            continue
        specs.append(ActionSpec(name=str(item["name"]), action=str(item["action"]), config=item.get("config")))
    return specs


def decode_task_shim_config(doc: dict) -> TaskShimConfig:
    errors: list[str] = []
    config = TaskShimConfig()
    config.webserver = webserver_from_dict(doc.get("webserver"), errors)
    if "actions" in doc:
        config.actions = _decode_actions(doc["actions"], "actions", errors)
    for yaml_key, attr in (("onCreateActions", "on_create_actions"),
                           ("onUpdateActions", "on_update_actions"),
                           ("onDeleteActions", "on_delete_actions")):
        if yaml_key in doc:
            setattr(config, attr, _decode_actions(doc[yaml_key], yaml_key, errors))
    config.create_timeout = duration_field(doc, "createTimeout", 60.0, errors)
    config.delete_timeout = duration_field(doc, "deleteTimeout", 60.0, errors)
    known_actions = {"meta", "file", "exec"}
    for spec in (config.actions + config.on_create_actions + config.on_update_actions + config.on_delete_actions):
        if spec.action not in known_actions:
            errors.append(f"unknown action id {spec.action!r} in action {spec.name!r}")
    if errors:
        raise InvalidConfig(errors)
    return config


register_config_kind(KIND_TASK_SHIM, decode_task_shim_config)


def render_action_config(spec: ActionSpec, context: dict) -> Any:
    """Object configs pass through verbatim; string configs are rendered as a
    template and must then parse as YAML or JSON."""
    if spec.config is None:
        return {}
    if isinstance(spec.config, dict):
        return spec.config
    rendered = template.render(str(spec.config), context)
    try:
        parsed = yaml.safe_load(rendered)
    except yaml.YAMLError as e:
        raise template.OutputNotParseable(f"action {spec.name!r}: rendered config is not valid YAML/JSON: {e}") from e
    if parsed is None:
        return {}
    if not isinstance(parsed, dict):
        raise template.OutputNotParseable(f"action {spec.name!r}: rendered config must be a mapping")
    return parsed


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._readers = 0
        self._cond = threading.Condition()

    def acquire_read(self):
        with self._cond:
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            self._cond.notify_all()

    def acquire_write(self):
        self._cond.acquire()
        while self._readers > 0:
            self._cond.wait()

    def release_write(self):
        self._cond.release()


class _EventReporter:
    """Orders lifecycle events through one background sender."""

    def __init__(self):
        self._client: eventsmod.Client | None = None
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def configure(self, report_url: str) -> None:
        if report_url:
            self._client = eventsmod.BackoffClient(
                eventsmod.HttpClient(report_url),
                policy=eventsmod.BackoffPolicy(initial_delay=0.1, total_cap=5.0))
        else:
            self._client = None

    def report(self, name: str, task_id: str) -> None:
        if self._client is None:
            return
        record = eventsmod.EventRecord.new(
            source=EVENT_SOURCE, type=EVENT_TYPE_PREFIX + name, subject=task_id,
            data={"task": task_id, "event": name})
        self._queue.put(record)

    def _run(self) -> None:
        while True:
            record = self._queue.get()
            if record is None:
                return
            client = self._client
            if client is None:
                continue
            try:
                client.send([record])
            except eventsmod.EventError as e:
                logger.warning("event %s delivery failed: %s", record.type, e)

    def drain(self, timeout: float = 5.0) -> None:
        import time as _time

        deadline = _time.monotonic() + timeout
        while not self._queue.empty() and _time.monotonic() < deadline:
            _time.sleep(0.02)

    def close(self) -> None:
        self._queue.put(None)


class FunctionSupervisor:
    """Runs the configured actions list as the long-lived function execution.

    stop() cancels the supervised context (killing any running subprocess) and
    waits for the runner to exit.
    """

    def __init__(self, shim: "TaskShim"):
        self.shim = shim
        self._thread: threading.Thread | None = None
        self._stop: StopToken | None = None
        self._lock = threading.Lock()
        self.outcome = OUTCOME_NONE
        self.outcome_event = threading.Event()

    @property
    def running(self) -> bool:
        with self._lock:
            return self._thread is not None and self._thread.is_alive()

    def start(self, context: dict) -> None:
        with self._lock:
            if self._thread is not None and self._thread.is_alive():
                raise AlreadyRunning("function is already running")
            self.outcome = OUTCOME_NONE
            self.outcome_event.clear()
            self.shim.function_outcome = OUTCOME_NONE
            self.shim.terminal_event.clear()
            self._stop = StopToken()
            self._thread = threading.Thread(target=self._run, args=(context, self._stop), daemon=True)
            self._thread.start()
        self.shim.report_event("started")

    def _run(self, context: dict, stop: StopToken) -> None:
        try:
            for spec in self.shim.config.actions:
                if stop.stopped:
                    self._finish(OUTCOME_STOPPED)
                    return
                self.shim.execute_action(spec, context, stop)
        except ActionError as e:
            if stop.stopped:
                self._finish(OUTCOME_STOPPED)
                return
            logger.error("function run failed: %s", e)
            self._finish(OUTCOME_FAILED, str(e))
            return
        self._finish(OUTCOME_STOPPED if stop.stopped else OUTCOME_SUCCEEDED)

    def _finish(self, outcome: str, message: str = "") -> None:
        self.outcome = outcome
        self.shim.on_function_finished(outcome, message)
        self.outcome_event.set()

    def stop(self, timeout: float = 10.0) -> None:
        with self._lock:
            thread = self._thread
            stop = self._stop
        if thread is None or not thread.is_alive():
            return
        if stop is not None:
            stop.stop()
        thread.join(timeout=timeout)


class TaskShim:
    def __init__(self, config: TaskShimConfig):
        self.config = config
        self.current: nbmp.Description | None = None
        self.old: nbmp.Description | None = None
        self.state = ""
        self.function_outcome = OUTCOME_NONE
        self._rw = RWLock()
        self.supervisor = FunctionSupervisor(self)
        self.reporter = _EventReporter()
        self.created_event = threading.Event()
        self.delete_event = threading.Event()
        self.terminal_event = threading.Event()
        bind = os.environ.get("NME_TASK_API_BIND")
        if bind:
            config.webserver.bind_address = bind
        self.server = HttpServer(config.webserver, name="task-shim")
        self.server.mount_health(lambda: None)
        self.server.add_routes([
            ("POST", TASKS_PATH, self.handle_create),
            ("GET", TASKS_PATH + "/{id}", self.handle_retrieve),
            ("PATCH", TASKS_PATH + "/{id}", self.handle_update),
            ("PUT", TASKS_PATH + "/{id}", self.handle_update),
            ("DELETE", TASKS_PATH + "/{id}", self.handle_delete),
        ])

    # -- events ------------------------------------------------------------------

    def report_event(self, name: str) -> None:
        task_id = self.current.general.id if self.current else ""
        self.reporter.report(name, task_id)

    def on_function_finished(self, outcome: str, message: str = "") -> None:
        self.function_outcome = outcome
        if outcome == OUTCOME_SUCCEEDED:
            self.state = nbmp.DESTROYED
            self.report_event("succeeded")
        elif outcome == OUTCOME_FAILED:
            self.state = nbmp.ERROR
            self.report_event("failed")
        elif outcome == OUTCOME_STOPPED:
            self.state = nbmp.DESTROYED
            self.report_event("stopped")
        self.terminal_event.set()

    # -- actions -------------------------------------------------------------------

    def _context(self) -> dict:
        # .Task/.OldTask carry the verbatim TDD JSON; .Config/.OldConfig
        # expose the configuration parameters as a flat map for templating
        context: dict[str, Any] = {}
        if self.current is not None:
            context["Task"] = self.current.to_json()
            context["Config"] = dict(self.current.configuration)
        if self.old is not None:
            context["OldTask"] = self.old.to_json()
            context["OldConfig"] = dict(self.old.configuration)
        return context

    def execute_action(self, spec: ActionSpec, context: dict, stop: StopToken | None = None) -> None:
        if spec.action == "meta":
            self._action_meta(spec, context)
            return
        config = render_action_config(spec, context)
        if spec.action == "file":
            self._action_file(config)
        elif spec.action == "exec":
            self._action_exec(config, stop)
        else:
            raise ActionError(f"unknown action {spec.action!r}")

    def run_action_list(self, specs: list[ActionSpec]) -> None:
        context = self._context()
        for spec in specs:
            self.execute_action(spec, context)

    def _action_meta(self, spec: ActionSpec, context: dict) -> None:
        kind = spec.config if isinstance(spec.config, str) else (spec.config or {}).get("type", "")
        kind = (kind or "").strip()
        if kind == META_START:
            self.supervisor.start(context)
        elif kind == META_STOP:
            self.supervisor.stop()
        elif kind == META_RESTART:
            self.supervisor.stop()
            self.supervisor.start(context)
        else:
            raise ActionError(f"unknown meta action {kind!r}")

    def _action_file(self, config: dict) -> None:
        path = config.get("path", "")
        if not path:
            raise ActionError("file action needs a path")
        content = config.get("content", "")
        if not isinstance(content, str):
            content = json.dumps(content, separators=(",", ":"), sort_keys=True)
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write(content)
        except OSError as e:
            raise ActionError(f"file action failed: {e}") from e

    def _action_exec(self, config: dict, stop: StopToken | None) -> None:
        command = config.get("command", "")
        if isinstance(command, str):
            command = shlex.split(command)
        args = config.get("args") or []
        if isinstance(args, str):
            args = shlex.split(args)
        argv = [str(c) for c in command] + [str(a) for a in args]
        if not argv:
            raise ActionError("exec action needs a command")
        env = dict(os.environ)
        env.update({str(k): str(v) for k, v in (config.get("env") or {}).items()})
        workdir = config.get("wd") or None
        try:
            proc = subprocess.Popen(argv, env=env, cwd=workdir, start_new_session=True)
        except OSError as e:
            raise SpawnFailed(f"cannot exec {argv[0]!r}: {e}") from e
        watcher = None
        if stop is not None:
            def cancel():
                stop.wait()
                if proc.poll() is None:
                    try:
                        os.killpg(os.getpgid(proc.pid), signal.SIGTERM)
                    except (ProcessLookupError, PermissionError):
                        pass

            watcher = threading.Thread(target=cancel, daemon=True)
            watcher.start()
        rc = proc.wait()
        if rc != 0:
            raise NonZeroExit(f"{argv[0]} exited with {rc}")

    # -- validation ------------------------------------------------------------------

    def _admit(self, body: bytes) -> nbmp.Description:
        d = nbmp.parse_document(body, nbmp.TDD)
        nbmp.default_description(d)
        violations = nbmp.validate_lax(d)
        if violations:
            raise nbmp.SchemaViolation(violations)
        if d.repository is not None:
            raise nbmp.SchemaViolation([nbmp.Violation("repository", "descriptor is not supported")])
        return d

    # -- responses ----------------------------------------------------------------------

    def _tdd_response(self, status: int) -> Response:
        d = self.current
        assert d is not None
        doc = d.to_json()
        doc["general"]["state"] = self.state or nbmp.RUNNING
        body = json.dumps(doc, separators=(",", ":")).encode()
        return Response(status, headers={"Content-Type": "application/json"}, body=body)

    def _error_response(self, status: int, failed: list[str]) -> Response:
        d = nbmp.Description(document_kind=nbmp.TDD, general=nbmp.General(
            id=self.current.general.id if self.current else ""))
        d.acknowledge = nbmp.make_acknowledge(nbmp.ACK_FAILED, failed=failed)
        return Response(status, headers={"Content-Type": "application/json"}, body=d.serialize())

    # -- handlers ------------------------------------------------------------------------

    def handle_create(self, request: Request) -> Response:
        self._rw.acquire_write()
        try:
            if self.current is not None:
                return self._error_response(409, ["task was already created; the task can only be created once"])
            try:
                d = self._admit(request.body())
            except (nbmp.MalformedJson, nbmp.SchemaViolation) as e:
                return self._error_response(400, [str(e)])
            if not d.general.id:
                d.general.id = "task-" + uuid.uuid4().hex[:12]
            self.current = d
            self.reporter.configure(d.reporting.url if d.reporting else "")
            self.state = nbmp.RUNNING
            self.report_event("created")
            try:
                self.run_action_list(self.config.on_create_actions)
            except (ActionError, template.TemplateError, template.OutputNotParseable) as e:
                self.state = nbmp.ERROR
                self.report_event("failed")
                self.terminal_event.set()
                return self._error_response(500, [f"create actions failed: {e}"])
            self.created_event.set()
            return self._tdd_response(201)
        finally:
            self._rw.release_write()

    def handle_retrieve(self, request: Request) -> Response:
        self._rw.acquire_read()
        try:
            if self.current is None or request.params["id"] != self.current.general.id:
                return self._error_response(404, ["task not found; it needs to be created first"])
            return self._tdd_response(200)
        finally:
            self._rw.release_read()

    def handle_update(self, request: Request) -> Response:
        self._rw.acquire_write()
        try:
            if self.current is None or request.params["id"] != self.current.general.id:
                return self._error_response(404, ["task not found; it needs to be created first"])
            try:
                d = self._admit(request.body())
            except (nbmp.MalformedJson, nbmp.SchemaViolation) as e:
                return self._error_response(400, [str(e)])
            d.general.id = self.current.general.id
            self.old = self.current
            self.current = d
            self.reporter.configure(d.reporting.url if d.reporting else "")
            self.report_event("updated")
            try:
                self.run_action_list(self.config.on_update_actions)
            except (ActionError, template.TemplateError, template.OutputNotParseable) as e:
                self.state = nbmp.ERROR
                self.report_event("failed")
                return self._error_response(500, [f"update actions failed: {e}"])
            return self._tdd_response(200)
        finally:
            self._rw.release_write()

    def handle_delete(self, request: Request) -> Response:
        self._rw.acquire_write()
        try:
            if self.current is None or request.params["id"] != self.current.general.id:
                return self._error_response(404, ["task not found; it needs to be created first"])
            try:
                self.run_action_list(self.config.on_delete_actions)
            except (ActionError, template.TemplateError, template.OutputNotParseable) as e:
                return self._error_response(500, [f"delete actions failed: {e}"])
            self.state = nbmp.DESTROYED
            self.report_event("deleted")
            response = self._tdd_response(200)
            self.delete_event.set()
            return response
        finally:
            self._rw.release_write()

    # -- lifecycle --------------------------------------------------------------------------

    def run(self, stop: StopToken) -> int:
        """Serve the task API; returns the process exit code."""
        server_stop = stop.child()
        server_thread = threading.Thread(target=self.server.start, args=(server_stop,), daemon=True)
        self.server.bind()
        server_thread.start()
        exit_code = 0
        try:
            if not self._wait(self.created_event, self.config.create_timeout, stop):
                logger.error("no create request within %.1fs", self.config.create_timeout)
                return 2
            # wait for the function to reach a terminal outcome (or an early delete)
            while not self.terminal_event.is_set() and not self.delete_event.is_set():
                if stop.wait(timeout=0.05):
                    break
            if not stop.stopped and not self.delete_event.is_set():
                if not self._wait(self.delete_event, self.config.delete_timeout, stop):
                    logger.error("no delete request within %.1fs after the function terminated",
                                 self.config.delete_timeout)
                    return 2
            if self.function_outcome == OUTCOME_FAILED or self.state == nbmp.ERROR:
                exit_code = 1
            return exit_code
        finally:
            self.supervisor.stop()
            self.reporter.drain()
            self.reporter.close()
            server_stop.stop()
            server_thread.join(timeout=5)

    @staticmethod
    def _wait(event: threading.Event, timeout: float, stop: StopToken) -> bool:
        import time as _time

        deadline = _time.monotonic() + timeout
        while _time.monotonic() < deadline:
            if event.wait(timeout=0.05):
                return True
            if stop.stopped:
                return True
        return event.is_set()
