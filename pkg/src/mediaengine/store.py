"""In-process declarative resource store.

Namespaced, versioned resource envelopes (apiVersion, kind, metadata, spec,
status) with label selection, watch subscriptions, finalizers, owner-reference
cascade deletion and in-process admission hooks. This is the orchestration
substrate all controllers reconcile against.

Resources are plain nested dicts. The store deep-copies on the way in and out,
so callers can never mutate stored state directly.
"""

from __future__ import annotations

import copy
import json
import os
import queue
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable

Resource = dict[str, Any]

CREATED = "created"
UPDATED = "updated"
DELETED = "deleted"


class StoreError(Exception):
    pass


class UnknownKind(StoreError):
    pass


class AlreadyExists(StoreError):
    pass


class NotFound(StoreError):
    pass


class Conflict(StoreError):
    """Optimistic concurrency failure; caller must re-read and retry."""


class ValidationRejected(StoreError):
    def __init__(self, messages: list[str]):
        super().__init__("; ".join(messages))
        self.messages = messages


class Lagged(StoreError):
    """Subscription fell behind and was closed; re-list and re-watch."""


@dataclass
class WatchEvent:
    type: str  # created | updated | deleted
    resource: Resource  # snapshot after the change (before, for deleted)
    old: Resource | None = None  # previous snapshot, for predicate filters


def spec_changed(event: WatchEvent) -> bool:
    """Predicate passing only events that touched the spec field."""
    if event.type != UPDATED:
        return True
    old = (event.old or {}).get("spec")
    return old != event.resource.get("spec")


class Subscription:
    """Bounded per-subscriber event queue.

    A slow subscriber never blocks writers: enqueue overflow closes the
    subscription, and the subscriber observes Lagged on its next read.
    """

    def __init__(self, store: "ResourceStore", matcher: Callable[[WatchEvent], bool], maxsize: int):
        self._store = store
        self._matcher = matcher
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._closed = False
        self._lagged = False

    def _offer(self, event: WatchEvent) -> None:
        if self._closed:
            return
        if not self._matcher(event):
            return
        try:
            self._queue.put_nowait(event)
        except queue.Full:
            self._lagged = True
            self._close_internal()

    def _close_internal(self) -> None:
        self._closed = True
        try:
            self._queue.put_nowait(None)
        except queue.Full:
            pass

    def get(self, timeout: float | None = None) -> WatchEvent | None:
        """Next event, or None if the subscription was closed cleanly.

        Raises Lagged once buffered events are drained after an overflow.
        """
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            if self._lagged:
                raise Lagged("watch subscription overflowed")
            return None
        if item is None:
            if self._lagged:
                raise Lagged("watch subscription overflowed")
            return None
        return item

    def __iter__(self):
        while True:
            item = self.get()
            if item is None:
                return
            yield item

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        self._store._unsubscribe(self)
        self._close_internal()


@dataclass
class _KindInfo:
    cluster_scoped: bool = False
    defaulter: Callable[[Resource], None] | None = None
    validator: Callable[[Resource], tuple[list[str], list[str]]] | None = None


def _now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _match_labels(resource: Resource, selector: dict[str, str] | None) -> bool:
    if not selector:
        return True
    labels = resource.get("metadata", {}).get("labels") or {}
    return all(labels.get(k) == v for k, v in selector.items())


class ResourceStore:
    """Thread-safe in-memory store with optional JSON snapshot persistence."""

    def __init__(self, snapshot_path: str | None = None):
        self._lock = threading.RLock()
        self._kinds: dict[str, _KindInfo] = {}
        self._items: dict[tuple[str, str, str], Resource] = {}
        self._subs: list[Subscription] = []
        self._write_hooks: list[Callable[[Resource], None]] = []
        self._snapshot_path = snapshot_path
        if snapshot_path and os.path.exists(snapshot_path):
            self._load_snapshot(snapshot_path)

    def add_write_hook(self, hook: Callable[[Resource], None]) -> None:
        """Run a callback on every committed write (create and both patch
        paths); an exception aborts the write. Used by tests to assert
        store-level invariants."""
        self._write_hooks.append(hook)

    # -- kind registration and admission ------------------------------------

    def register_kind(self, kind: str, cluster_scoped: bool = False) -> None:
        with self._lock:
            if kind not in self._kinds:
                self._kinds[kind] = _KindInfo(cluster_scoped=cluster_scoped)

    def register_admission(
        self,
        kind: str,
        defaulter: Callable[[Resource], None] | None = None,
        validator: Callable[[Resource], tuple[list[str], list[str]]] | None = None,
    ) -> None:
        with self._lock:
            info = self._kinds.get(kind)
            if info is None:
                raise UnknownKind(kind)
            info.defaulter = defaulter
            info.validator = validator

    def _kind_info(self, kind: str) -> _KindInfo:
        info = self._kinds.get(kind)
        if info is None:
            raise UnknownKind(kind)
        return info

    def _admit(self, resource: Resource, warning_sink: list[str] | None) -> None:
        info = self._kind_info(resource["kind"])
        if info.defaulter:
            info.defaulter(resource)
        if info.validator:
            errors, warnings = info.validator(resource)
            if warning_sink is not None and warnings:
                warning_sink.extend(warnings)
            if errors:
                raise ValidationRejected(errors)

    # -- core operations ------------------------------------------------------

    def create(self, resource: Resource, warning_sink: list[str] | None = None) -> Resource:
        resource = copy.deepcopy(resource)
        kind = resource.get("kind") or ""
        info = self._kind_info(kind)
        meta = resource.setdefault("metadata", {})
        name = meta.get("name")
        if not name:
            raise ValidationRejected(["metadata.name is required"])
        if info.cluster_scoped:
            meta["namespace"] = ""
        namespace = meta.setdefault("namespace", "")
        with self._lock:
            self._admit(resource, warning_sink)
            key = (kind, namespace, name)
            if key in self._items:
                raise AlreadyExists(f"{kind} {namespace}/{name} already exists")
            meta.pop("deletionTimestamp", None)
            meta["uid"] = uuid.uuid4().hex
            meta["resourceVersion"] = 1
            meta["creationTimestamp"] = _now_iso()
            meta.setdefault("labels", {})
            meta.setdefault("annotations", {})
            meta.setdefault("finalizers", [])
            meta.setdefault("ownerReferences", [])
            for hook in self._write_hooks:
                hook(resource)
            self._items[key] = resource
            stored = copy.deepcopy(resource)
            self._write_snapshot()
            self._notify(WatchEvent(CREATED, copy.deepcopy(resource)))
        return stored

    def get(self, kind: str, namespace: str, name: str) -> Resource:
        self._kind_info(kind)
        with self._lock:
            item = self._items.get((kind, namespace, name))
            if item is None:
                raise NotFound(f"{kind} {namespace}/{name} not found")
            return copy.deepcopy(item)

    def list(
        self,
        kind: str,
        namespace: str | None = None,
        selector: dict[str, str] | None = None,
        predicate: Callable[[Resource], bool] | None = None,
    ) -> list[Resource]:
        self._kind_info(kind)
        with self._lock:
            out = []
            for (k, ns, _), item in sorted(self._items.items()):
                if k != kind:
                    continue
                if namespace is not None and ns != namespace:
                    continue
                if not _match_labels(item, selector):
                    continue
                if predicate and not predicate(item):
                    continue
                out.append(copy.deepcopy(item))
            return out

    def patch(
        self,
        resource: Resource,
        expected_version: int | None = None,
        status: bool = False,
        warning_sink: list[str] | None = None,
    ) -> Resource:
        """Overwrite changed fields of an existing resource.

        The main path (status=False) takes metadata (labels, annotations,
        finalizers, ownerReferences) and spec from the argument; the status
        path takes only status. A no-op patch leaves resourceVersion untouched
        and emits no watch event.
        """
        kind = resource.get("kind") or ""
        self._kind_info(kind)
        meta = resource.get("metadata", {})
        key = (kind, meta.get("namespace", ""), meta.get("name"))
        with self._lock:
            current = self._items.get(key)
            if current is None:
                raise NotFound(f"{kind} {key[1]}/{key[2]} not found")
            cur_version = current["metadata"]["resourceVersion"]
            if expected_version is not None and expected_version != cur_version:
                raise Conflict(
                    f"{kind} {key[1]}/{key[2]}: expected version {expected_version}, have {cur_version}"
                )
            updated = copy.deepcopy(current)
            if status:
                updated["status"] = copy.deepcopy(resource.get("status"))
            else:
                new_meta = resource.get("metadata", {})
                for f in ("labels", "annotations", "ownerReferences"):
                    if f in new_meta:
                        updated["metadata"][f] = copy.deepcopy(new_meta[f])
                if "finalizers" in new_meta:
                    updated["metadata"]["finalizers"] = list(new_meta["finalizers"])
                if "spec" in resource:
                    updated["spec"] = copy.deepcopy(resource["spec"])
                self._admit(updated, warning_sink)
                # deletionTimestamp is server-owned and never cleared
                if current["metadata"].get("deletionTimestamp"):
                    updated["metadata"]["deletionTimestamp"] = current["metadata"]["deletionTimestamp"]
            # server-owned identity fields always win
            for f in ("uid", "resourceVersion", "creationTimestamp", "name", "namespace"):
                if f in current["metadata"]:
                    updated["metadata"][f] = current["metadata"][f]
            if updated == current:
                return copy.deepcopy(current)
            updated["metadata"]["resourceVersion"] = cur_version + 1
            for hook in self._write_hooks:
                hook(updated)
            self._items[key] = updated
            old = copy.deepcopy(current)
            stored = copy.deepcopy(updated)
            self._write_snapshot()
            self._notify(WatchEvent(UPDATED, copy.deepcopy(updated), old=old))
            # removing the last finalizer of a deleting resource completes removal
            if updated["metadata"].get("deletionTimestamp") and not updated["metadata"].get("finalizers"):
                self._remove(key)
        return stored

    def delete(self, kind: str, namespace: str, name: str) -> None:
        self._kind_info(kind)
        with self._lock:
            key = (kind, namespace, name)
            current = self._items.get(key)
            if current is None:
                raise NotFound(f"{kind} {namespace}/{name} not found")
            if current["metadata"].get("finalizers"):
                if not current["metadata"].get("deletionTimestamp"):
                    updated = copy.deepcopy(current)
                    updated["metadata"]["deletionTimestamp"] = _now_iso()
                    updated["metadata"]["resourceVersion"] += 1
                    self._items[key] = updated
                    self._write_snapshot()
                    self._notify(WatchEvent(UPDATED, copy.deepcopy(updated), old=copy.deepcopy(current)))
                return
            self._remove(key)

    def _remove(self, key: tuple[str, str, str]) -> None:
        # caller holds the lock
        current = self._items.pop(key, None)
        if current is None:
            return
        self._write_snapshot()
        self._notify(WatchEvent(DELETED, copy.deepcopy(current)))
        self._cascade(current["metadata"]["uid"])

    def _cascade(self, owner_uid: str) -> None:
        owned = [
            (k, item)
            for k, item in list(self._items.items())
            if any(ref.get("uid") == owner_uid for ref in item["metadata"].get("ownerReferences", []))
        ]
        for key, item in owned:
            if item["metadata"].get("finalizers"):
                if not item["metadata"].get("deletionTimestamp"):
                    updated = copy.deepcopy(item)
                    updated["metadata"]["deletionTimestamp"] = _now_iso()
                    updated["metadata"]["resourceVersion"] += 1
                    self._items[key] = updated
                    self._write_snapshot()
                    self._notify(WatchEvent(UPDATED, copy.deepcopy(updated), old=copy.deepcopy(item)))
            else:
                self._remove(key)

    # -- watch ---------------------------------------------------------------

    def watch(
        self,
        kind: str,
        namespace: str | None = None,
        selector: dict[str, str] | None = None,
        predicate: Callable[[WatchEvent], bool] | None = None,
        queue_size: int = 1024,
    ) -> Subscription:
        self._kind_info(kind)

        def matcher(event: WatchEvent) -> bool:
            r = event.resource
            if r.get("kind") != kind:
                return False
            if namespace is not None and r["metadata"].get("namespace", "") != namespace:
                return False
            if not _match_labels(r, selector):
                return False
            if predicate and not predicate(event):
                return False
            return True

        sub = Subscription(self, matcher, queue_size)
        with self._lock:
            self._subs.append(sub)
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def _notify(self, event: WatchEvent) -> None:
        # Enqueue is put_nowait and never blocks; overflow closes the laggard.
        for sub in list(self._subs):
            sub._offer(event)

    # -- snapshot persistence --------------------------------------------------

    def _write_snapshot(self) -> None:
        if not self._snapshot_path:
            return
        doc = {
            "kinds": {k: info.cluster_scoped for k, info in self._kinds.items()},
            "resources": [item for _, item in sorted(self._items.items())],
        }
        tmp = self._snapshot_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        os.replace(tmp, self._snapshot_path)

    def _load_snapshot(self, path: str) -> None:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        for kind, cluster_scoped in doc.get("kinds", {}).items():
            self.register_kind(kind, cluster_scoped=cluster_scoped)
        for item in doc.get("resources", []):
            kind = item["kind"]
            meta = item["metadata"]
            self.register_kind(kind)
            self._items[(kind, meta.get("namespace", ""), meta["name"])] = item
