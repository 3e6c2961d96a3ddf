"""Workflow manager: bundles the MPE, workflow, task and job controllers.

One process hosts all controllers plus a health endpoint. Backend sessions are
opened by the MPE controller; each open session gets a job watcher that feeds
job changes back into the task controller as generic events.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from mediaengine import model
from mediaengine.backend import BackendConfig, FakeSession, Session, open_local_session
from mediaengine.config import (
    KIND_WORKFLOW_MANAGER,
    duration_field,
    register_config_kind,
    webserver_from_dict,
    InvalidConfig,
)
from mediaengine.controllers.mpe import MpeController, SessionRegistry
from mediaengine.controllers.task import JobWatcher, TaskController
from mediaengine.controllers.workflow import WorkflowController
from mediaengine.httpkit import HttpServer, WebserverConfig
from mediaengine.runtime import StarterManager, StopToken
from mediaengine.store import ResourceStore

logger = logging.getLogger("mediaengine.controllers.manager")


@dataclass
class WorkflowManagerSettings:
    webserver: WebserverConfig = field(default_factory=lambda: WebserverConfig(bind_address="127.0.0.1:0"))
    max_concurrent_reconciles: int = 2
    workflow_termination_waiting_duration: float = 20.0
    remote_mpe_stabilizing_duration: float = 5.0
    event_log_root: str = ""
    store_snapshot_path: str = ""
    backend: BackendConfig | None = None
    use_fake_backend: bool = False


def decode_workflow_manager_config(doc: dict) -> WorkflowManagerSettings:
    errors: list[str] = []
    settings = WorkflowManagerSettings()
    settings.webserver = webserver_from_dict(doc.get("webserver"), errors)
    controller = doc.get("controller") or {}
    if "maxConcurrentReconciles" in controller:
        settings.max_concurrent_reconciles = int(controller["maxConcurrentReconciles"])
        if settings.max_concurrent_reconciles < 1:
            errors.append("controller.maxConcurrentReconciles must be >= 1")
    settings.workflow_termination_waiting_duration = duration_field(
        controller, "workflowTerminationWaitingDuration", 20.0, errors, "controller.")
    settings.remote_mpe_stabilizing_duration = duration_field(
        controller, "remoteMPEStabilizingDuration", 5.0, errors, "controller.")
    event_log = doc.get("eventLog") or {}
    settings.event_log_root = str(event_log.get("root", ""))
    store = doc.get("store") or {}
    settings.store_snapshot_path = str(store.get("snapshotPath", ""))
    backend = doc.get("backend") or {}
    if backend:
        helper_command = backend.get("helperCommand")
        if helper_command is not None and not isinstance(helper_command, list):
            errors.append("backend.helperCommand must be a list of arguments")
            helper_command = None
        settings.backend = BackendConfig(
            root_dir=str(backend.get("rootDir", "")),
            helper_command=[str(a) for a in helper_command] if helper_command else None,
            grace_period=duration_field(backend, "gracePeriod", 0.5, errors, "backend."),
        )
        if not settings.backend.root_dir:
            errors.append("backend.rootDir is required")
    if errors:
        raise InvalidConfig(errors)
    return settings


register_config_kind(KIND_WORKFLOW_MANAGER, decode_workflow_manager_config)


class WorkflowManager:
    """All controllers wired over one store and one session registry."""

    def __init__(self, store: ResourceStore, settings: WorkflowManagerSettings):
        self.store = store
        self.settings = settings
        model.register_engine_kinds(store)
        self.registry = SessionRegistry()
        self.task_controller = TaskController(
            store, self.registry,
            event_log_root=settings.event_log_root,
            max_concurrent=settings.max_concurrent_reconciles,
        )
        self.workflow_controller = WorkflowController(
            store,
            termination_waiting_duration=settings.workflow_termination_waiting_duration,
            max_concurrent=settings.max_concurrent_reconciles,
        )
        self.mpe_controller = MpeController(
            store, self.registry, self._session_factory,
            remote_stabilizing_duration=settings.remote_mpe_stabilizing_duration,
            on_session_open=self._on_session_open,
        )
        self.health_server = HttpServer(settings.webserver, name="workflow-manager")
        self.health_server.mount_health(lambda: None)
        self._stop: StopToken | None = None
        self._watcher_threads: list[threading.Thread] = []

    def _session_factory(self, mpe: dict, connection: dict | None) -> Session:
        if self.settings.use_fake_backend or self.settings.backend is None:
            return FakeSession(namespace=mpe["metadata"].get("namespace", "") or mpe["metadata"]["name"])
        spec = mpe.get("spec") or {}
        if "local" in spec:
            namespace = spec["local"].get("namespace") or mpe["metadata"].get("namespace", "default")
        else:
            # the local execution backend stands in for remote clusters too;
            # the connection secret only selects the namespace
            namespace = (connection or {}).get("namespace") or mpe["metadata"]["name"]
        return open_local_session(namespace, self.settings.backend)

    def _on_session_open(self, key, session: Session) -> None:
        watcher = JobWatcher(session, self.task_controller)
        stop = self._stop or StopToken()
        t = threading.Thread(target=watcher.start, args=(stop.child(),),
                             name=f"job-watcher/{key[2]}", daemon=True)
        t.start()
        self._watcher_threads.append(t)

    def start(self, stop: StopToken) -> None:
        self._stop = stop
        manager = StarterManager("workflow-manager")
        manager.manage("mpe-controller", self.mpe_controller.start)
        manager.manage("workflow-controller", self.workflow_controller.start)
        manager.manage("task-controller", self.task_controller.start)
        manager.manage("health", self.health_server.start)
        manager.start(stop)

    def run_background(self) -> StopToken:
        stop = StopToken()
        t = threading.Thread(target=self.start, args=(stop,), name="workflow-manager", daemon=True)
        t.start()
        self._thread = t
        return stop

    def stop_and_join(self, stop: StopToken, timeout: float = 10.0) -> None:
        stop.stop()
        thread = getattr(self, "_thread", None)
        if thread is not None:
            thread.join(timeout=timeout)

    def crash_and_join(self, stop: StopToken, timeout: float = 10.0) -> None:
        """Simulate abrupt control-plane death: backend job processes are left
        running for the next manager to adopt."""
        self.mpe_controller.abandon_sessions()
        self.stop_and_join(stop, timeout=timeout)
