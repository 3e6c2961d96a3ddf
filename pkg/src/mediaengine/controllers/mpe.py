"""MediaProcessingEntity controller.

Opens and maintains one execution-backend session per (Cluster)MPE resource.
Local MPEs connect immediately; remote MPEs read their connection secret file
and then wait out a stabilizing window before being declared Ready. Session
death triggers a new reconciliation via a generic event; deletion closes and
unregisters the session.
"""

from __future__ import annotations

import copy
import json
import logging
import threading
import time
from typing import Callable

from mediaengine import model
from mediaengine.backend import Session
from mediaengine.controllers.runtime import Controller, Key, ReconcileResult
from mediaengine.store import NotFound, ResourceStore

logger = logging.getLogger("mediaengine.controllers.mpe")

FINALIZER = model.GROUP + "/mpe-controller"


class SessionRegistry:
    """Thread-safe map of MPE resource keys to open backend sessions."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[Key, Session] = {}
        self._opened_at: dict[Key, float] = {}

    def get(self, key: Key) -> Session | None:
        with self._lock:
            return self._sessions.get(key)

    def get_by_ref(self, ref: dict) -> Session | None:
        key = (ref.get("kind", model.KIND_MPE), ref.get("namespace", ""), ref.get("name", ""))
        return self.get(key)

    def put(self, key: Key, session: Session) -> None:
        with self._lock:
            self._sessions[key] = session
            self._opened_at[key] = time.monotonic()

    def opened_at(self, key: Key) -> float | None:
        with self._lock:
            return self._opened_at.get(key)

    def pop(self, key: Key) -> Session | None:
        with self._lock:
            self._opened_at.pop(key, None)
            return self._sessions.pop(key, None)

    def items(self) -> list[tuple[Key, Session]]:
        with self._lock:
            return list(self._sessions.items())

    def close_all(self) -> None:
        for _, session in self.items():
            session.close()
        with self._lock:
            self._sessions.clear()
            self._opened_at.clear()


# factory(mpe_resource, connection_info_or_None) -> Session
SessionFactory = Callable[[dict, dict | None], Session]


class MpeController:
    def __init__(self, store: ResourceStore, registry: SessionRegistry, factory: SessionFactory,
                 remote_stabilizing_duration: float = 5.0,
                 on_session_open: Callable[[Key, Session], None] | None = None):
        self.store = store
        self.registry = registry
        self.factory = factory
        self.remote_stabilizing_duration = remote_stabilizing_duration
        self.on_session_open = on_session_open
        self.controller = Controller("mpe", self.reconcile)
        self.controller.watch_store(store, model.KIND_MPE)
        self.controller.watch_store(store, model.KIND_CLUSTER_MPE)
        self._stopping = False

    def start(self, stop) -> None:
        try:
            self.controller.start(stop)
        finally:
            self._stopping = True
            self.registry.close_all()

    def abandon_sessions(self) -> None:
        """Crash simulation: stop reopening sessions and abandon the open ones
        so their job processes survive the control plane."""
        self._stopping = True
        for _, session in self.registry.items():
            abandon = getattr(session, "abandon", None)
            if abandon is not None:
                abandon()

    def reconcile(self, key: Key) -> ReconcileResult:
        kind, namespace, name = key
        try:
            mpe = self.store.get(kind, namespace, name)
        except NotFound:
            session = self.registry.pop(key)
            if session is not None:
                session.close()
            return ReconcileResult.done()

        meta = mpe["metadata"]
        if FINALIZER not in meta.get("finalizers", []):
            meta.setdefault("finalizers", []).append(FINALIZER)
            self.store.patch(mpe, expected_version=mpe["metadata"]["resourceVersion"])
            return ReconcileResult.done()

        if meta.get("deletionTimestamp"):
            session = self.registry.pop(key)
            if session is not None:
                session.close()
            meta["finalizers"] = [f for f in meta["finalizers"] if f != FINALIZER]
            self.store.patch(mpe, expected_version=mpe["metadata"]["resourceVersion"])
            return ReconcileResult.done()

        session = self.registry.get(key)
        if session is not None and not session.alive:
            self.registry.pop(key)
            session = None
        if session is None:
            try:
                session = self._open(key, mpe)
            except Exception as e:
                self._set_failed(mpe, str(e))
                raise
        is_remote = "remote" in (mpe.get("spec") or {})
        if is_remote:
            opened = self.registry.opened_at(key) or time.monotonic()
            remaining = opened + self.remote_stabilizing_duration - time.monotonic()
            if remaining > 0:
                return ReconcileResult.after(remaining)
        if not session.alive:
            self.registry.pop(key)
            self._set_failed(mpe, "backend session terminated during stabilization")
            raise RuntimeError("backend session terminated")
        self._set_ready(mpe)
        return ReconcileResult.done()

    def _open(self, key: Key, mpe: dict) -> Session:
        spec = mpe.get("spec") or {}
        connection = None
        if "remote" in spec:
            secret_path = (spec["remote"].get("connectionSecretRef") or {}).get("name", "")
            try:
                with open(secret_path, encoding="utf-8") as f:
                    connection = json.load(f)
            except OSError as e:
                raise RuntimeError(f"cannot read connection secret {secret_path!r}: {e}") from e
            except json.JSONDecodeError as e:
                raise RuntimeError(f"connection secret {secret_path!r} is not valid JSON: {e}") from e
        session = self.factory(mpe, connection)
        self.registry.put(key, session)
        self._watch_session_death(key, session)
        if self.on_session_open:
            self.on_session_open(key, session)
        return session

    def _watch_session_death(self, key: Key, session: Session) -> None:
        closed_event = getattr(session, "closed_event", None)
        if closed_event is None:
            return

        def waiter():
            closed_event.wait()
            if not self._stopping:
                logger.info("mpe %s: backend session died, re-reconciling", key)
                self.controller.enqueue(key)

        threading.Thread(target=waiter, name=f"mpe-death/{key[2]}", daemon=True).start()

    def _set_ready(self, mpe: dict) -> None:
        status = copy.deepcopy(mpe.get("status") or {})
        model.set_condition(status, "Ready", "True", reason="SessionOpen",
                            message="backend session established")
        model.set_condition(status, "Failed", "False", reason="SessionOpen", message="")
        self._patch_status(mpe, status)

    def _set_failed(self, mpe: dict, message: str) -> None:
        status = copy.deepcopy(mpe.get("status") or {})
        model.set_condition(status, "Ready", "False", reason="SessionError", message=message)
        model.set_condition(status, "Failed", "True", reason="SessionError", message=message)
        self._patch_status(mpe, status)

    def _patch_status(self, mpe: dict, status: dict) -> None:
        if status == (mpe.get("status") or {}):
            return
        update = {"kind": mpe["kind"], "metadata": mpe["metadata"], "status": status}
        try:
            self.store.patch(update, status=True)
        except NotFound:
            pass
