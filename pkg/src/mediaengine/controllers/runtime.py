"""Controller runtime: work queue, watch wiring and retry backoff.

Keys are (kind, namespace, name) tuples. The queue coalesces per key (a key
enqueued twice before dispatch reconciles once), never runs two reconciles for
the same key concurrently, and requeues error results with exponentially
growing per-key delays that reset on success. Reconciler exceptions are
contained and counted as error results.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
import traceback
from dataclasses import dataclass
from typing import Callable

from mediaengine.runtime import StopToken
from mediaengine.store import Lagged, ResourceStore, Subscription, WatchEvent

logger = logging.getLogger("mediaengine.controllers")

Key = tuple[str, str, str]  # kind, namespace, name


@dataclass
class ReconcileResult:
    requeue_after: float | None = None

    @classmethod
    def done(cls) -> "ReconcileResult":
        return cls()

    @classmethod
    def after(cls, delay: float) -> "ReconcileResult":
        return cls(requeue_after=delay)


DONE = ReconcileResult()


class Backoff:
    """Per-key exponential delay, reset on success."""

    def __init__(self, base: float = 0.005, factor: float = 2.0, cap: float = 1.0):
        self.base = base
        self.factor = factor
        self.cap = cap
        self._counts: dict[Key, int] = {}
        self._lock = threading.Lock()

    def next_delay(self, key: Key) -> float:
        with self._lock:
            n = self._counts.get(key, 0)
            self._counts[key] = n + 1
        return min(self.base * (self.factor ** n), self.cap)

    def reset(self, key: Key) -> None:
        with self._lock:
            self._counts.pop(key, None)


class WorkQueue:
    """Delay queue with per-key coalescing and in-flight exclusion."""

    def __init__(self):
        self._cond = threading.Condition()
        self._not_before: dict[Key, float] = {}
        self._heap: list[tuple[float, Key]] = []
        self._inflight: set[Key] = set()
        self._dirty: set[Key] = set()
        self._closed = False

    def add(self, key: Key, delay: float = 0.0) -> None:
        ready_at = time.monotonic() + max(0.0, delay)
        with self._cond:
            if self._closed:
                return
            if key in self._inflight:
                self._dirty.add(key)
                return
            current = self._not_before.get(key)
            if current is not None and current <= ready_at:
                return  # already queued at least as early
            self._not_before[key] = ready_at
            heapq.heappush(self._heap, (ready_at, key))
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> Key | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self._closed:
                    return None
                now = time.monotonic()
                wait_for = None
                while self._heap:
                    ready_at, key = self._heap[0]
                    if self._not_before.get(key) != ready_at:
                        heapq.heappop(self._heap)  # stale entry
                        continue
                    if ready_at <= now:
                        heapq.heappop(self._heap)
                        del self._not_before[key]
                        self._inflight.add(key)
                        return key
                    wait_for = ready_at - now
                    break
                if deadline is not None:
                    remaining = deadline - now
                    if remaining <= 0:
                        return None
                    wait_for = remaining if wait_for is None else min(wait_for, remaining)
                self._cond.wait(timeout=wait_for)

    def done(self, key: Key, requeue_delay: float | None = None) -> None:
        with self._cond:
            self._inflight.discard(key)
            dirty = key in self._dirty
            self._dirty.discard(key)
        if dirty:
            self.add(key, 0.0)
        elif requeue_delay is not None:
            self.add(key, requeue_delay)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._not_before) + len(self._inflight)


Reconciler = Callable[[Key], ReconcileResult | None]
Mapper = Callable[[WatchEvent], list[Key]]


def default_mapper(event: WatchEvent) -> list[Key]:
    meta = event.resource["metadata"]
    return [(event.resource["kind"], meta.get("namespace", ""), meta["name"])]


class Controller:
    """One reconciliation loop over a set of event sources."""

    def __init__(self, name: str, reconciler: Reconciler, max_concurrent: int = 1,
                 backoff: Backoff | None = None):
        if max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.name = name
        self.reconciler = reconciler
        self.max_concurrent = max_concurrent
        self.backoff = backoff or Backoff()
        self.queue = WorkQueue()
        self._watches: list[tuple[Callable[[], Subscription], Callable[[], list[WatchEvent]], Mapper]] = []
        self.reconcile_errors = 0

    def watch_store(self, store: ResourceStore, kind: str, namespace: str | None = None,
                    selector: dict[str, str] | None = None, predicate=None,
                    mapper: Mapper | None = None) -> None:
        def subscribe() -> Subscription:
            return store.watch(kind, namespace=namespace, selector=selector, predicate=predicate)

        def list_existing() -> list[WatchEvent]:
            return [WatchEvent("created", r)
                    for r in store.list(kind, namespace=namespace, selector=selector)]

        self._watches.append((subscribe, list_existing, mapper or default_mapper))

    def enqueue(self, key: Key, delay: float = 0.0) -> None:
        """Generic event source: any thread may trigger a reconciliation."""
        self.queue.add(key, delay)

    def start(self, stop: StopToken) -> None:
        threads: list[threading.Thread] = []
        subscriptions: list[Subscription] = []
        for subscribe, list_existing, mapper in self._watches:
            # subscribe before the initial list so no event falls in a gap;
            # duplicates coalesce in the queue
            sub = subscribe()
            subscriptions.append(sub)
            for event in list_existing():
                try:
                    for key in mapper(event):
                        self.queue.add(key)
                except Exception:
                    logger.exception("%s: initial sync mapper failed", self.name)
            t = threading.Thread(target=self._pump, args=(sub, mapper, stop),
                                 name=f"{self.name}/watch", daemon=True)
            threads.append(t)
        for i in range(self.max_concurrent):
            t = threading.Thread(target=self._worker, args=(stop,),
                                 name=f"{self.name}/worker-{i}", daemon=True)
            threads.append(t)
        for t in threads:
            t.start()
        stop.wait()
        self.queue.close()
        for sub in subscriptions:
            sub.close()
        for t in threads:
            t.join(timeout=2)

    def _pump(self, sub: Subscription, mapper: Mapper, stop: StopToken) -> None:
        while not stop.stopped:
            try:
                event = sub.get(timeout=0.2)
            except Lagged:
                logger.warning("%s: watch lagged, resynchronizing is up to the reconciler", self.name)
                return
            if event is None:
                if sub.closed:
                    return
                continue
            try:
                keys = mapper(event)
            except Exception:
                logger.exception("%s: watch mapper failed", self.name)
                continue
            for key in keys:
                self.queue.add(key)

    def _worker(self, stop: StopToken) -> None:
        while not stop.stopped:
            key = self.queue.get(timeout=0.2)
            if key is None:
                continue
            requeue_delay: float | None = None
            try:
                result = self.reconciler(key)
            except Exception as e:
                self.reconcile_errors += 1
                delay = self.backoff.next_delay(key)
                logger.info("%s: reconcile %s failed (%s), retrying in %.3fs", self.name, key, e, delay)
                logger.debug("%s", traceback.format_exc())
                requeue_delay = delay
            else:
                self.backoff.reset(key)
                if result is not None and result.requeue_after is not None:
                    requeue_delay = result.requeue_after
            self.queue.done(key, requeue_delay)
