"""Concurrency harness and updatable values.

StopToken carries hierarchical cancellation (cancelling a parent cancels all
children). StarterManager launches a set of starters simultaneously and, by
default, treats the first exit as a trigger to cancel all others; managers
compose, so hierarchies with mixed policies are possible.

Updatable holds a versioned value and notifies subscribers only when the
content hash changes; watch_file implements it for files by polling and
hashing, so touches and permission flips without content change stay silent.
"""

from __future__ import annotations

import hashlib
import logging
import os
import queue
import re
import threading
import traceback
from dataclasses import dataclass
from typing import Any, Callable

logger = logging.getLogger("mediaengine.runtime")

# A starter is a callable taking the stop token, run in its own thread.
Starter = Callable[["StopToken"], None]


class StopToken:
    """Cancellation signal with parent/child linking."""

    def __init__(self, parent: "StopToken" | None = None):
        self._event = threading.Event()
        self._lock = threading.Lock()
        self._children: list[StopToken] = []
        if parent is not None:
            parent._register(self)

    def _register(self, child: "StopToken") -> None:
        with self._lock:
            self._children.append(child)
            if self._event.is_set():
                child.stop()

    def child(self) -> "StopToken":
        return StopToken(parent=self)

    def stop(self) -> None:
        self._event.set()
        with self._lock:
            children = list(self._children)
        for c in children:
            c.stop()

    @property
    def stopped(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._event.wait(timeout=timeout)

    # threading.Event compatibility so a StopToken can stand in for one
    def is_set(self) -> bool:
        return self._event.is_set()

    def set(self) -> None:
        self.stop()


@dataclass
class MemberResult:
    name: str
    error: BaseException | None


class StarterManager:
    """Runs members simultaneously; composable as a starter itself."""

    FIRST_EXIT_CANCELS_ALL = "first-exit-cancels-all"
    WAIT_FOR_ALL = "wait-for-all"

    def __init__(self, name: str = "manager"):
        self.name = name
        self._members: list[tuple[str, Starter]] = []
        self._policy = self.FIRST_EXIT_CANCELS_ALL
        self.results: list[MemberResult] = []

    def manage(self, name: str, starter: Starter) -> "StarterManager":
        self._members.append((name, starter))
        return self

    def wait_for_all_to_terminate(self) -> "StarterManager":
        self._policy = self.WAIT_FOR_ALL
        return self

    def start(self, stop: StopToken) -> None:
        """Run all members until they exit; returns after every member exited.

        Under the default policy the first member to exit (normally or with an
        error) cancels all others.
        """
        token = stop.child() if isinstance(stop, StopToken) else _adapt_event(stop)
        threads: list[threading.Thread] = []
        done = threading.Event()
        lock = threading.Lock()

        def run(name: str, starter: Starter) -> None:
            error: BaseException | None = None
            try:
                starter(token)
            except BaseException as e:  # contain member crashes
                error = e
                logger.error("%s: member %s failed: %s\n%s", self.name, name, e, traceback.format_exc())
            finally:
                with lock:
                    self.results.append(MemberResult(name, error))
                if self._policy == self.FIRST_EXIT_CANCELS_ALL:
                    token.stop()
                done.set()

        for name, starter in self._members:
            t = threading.Thread(target=run, args=(name, starter), name=f"{self.name}/{name}", daemon=True)
            threads.append(t)
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def run(self, stop: StopToken | None = None) -> list[MemberResult]:
        token = stop or StopToken()
        self.start(token)
        return self.results

    @property
    def failed(self) -> bool:
        return any(r.error is not None for r in self.results)


def _adapt_event(event) -> StopToken:
    token = StopToken()
    threading.Thread(target=lambda: (event.wait(), token.stop()), daemon=True).start()
    return token


# -- updatable values --------------------------------------------------------------


@dataclass
class VersionedValue:
    version: str
    value: Any
    error: Exception | None = None


class Updatable:
    """A versioned value with change subscriptions.

    Subscribers are notified only when the version (a content hash) changes.
    A failing transform is surfaced to subscribers as an error value while Get
    keeps returning the last good value.
    """

    def __init__(self, initial: VersionedValue):
        self._lock = threading.RLock()
        self._current = initial
        self._last_good = initial if initial.error is None else None
        self._subscribers: list[queue.Queue] = []
        self._closed = False

    def get(self) -> VersionedValue:
        with self._lock:
            return self._last_good if self._last_good is not None else self._current

    def subscribe(self) -> tuple[VersionedValue, queue.Queue]:
        with self._lock:
            q: queue.Queue = queue.Queue()
            self._subscribers.append(q)
            return self.get(), q

    def publish(self, new: VersionedValue) -> None:
        with self._lock:
            if self._closed or new.version == self._current.version:
                return
            self._current = new
            if new.error is None:
                self._last_good = new
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put(new)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            subscribers = list(self._subscribers)
            self._subscribers.clear()
        for q in subscribers:
            q.put(None)

    @property
    def version(self) -> str:
        with self._lock:
            return self._current.version


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class FileWatcher(Updatable):
    """Updatable backed by a file, versioned by the SHA-256 of its content."""

    def __init__(self, path: str, transform: Callable[[bytes], Any] | None = None, poll_interval: float = 0.1):
        self.path = path
        self.transform = transform or (lambda data: data)
        self.poll_interval = poll_interval
        initial = self._read()
        if initial.error is not None:
            raise initial.error
        super().__init__(initial)
        self._thread: threading.Thread | None = None

    def _read(self) -> VersionedValue:
        with open(self.path, "rb") as f:
            data = f.read()
        version = _hash_bytes(data)
        try:
            value = self.transform(data)
        except Exception as e:
            return VersionedValue(version=version, value=None, error=e)
        return VersionedValue(version=version, value=value)

    def start(self, stop) -> None:
        """Poll for content changes until stopped."""
        try:
            while not stop.wait(timeout=self.poll_interval):
                self._poll_once()
        finally:
            self.close()

    def start_background(self, stop) -> None:
        self._thread = threading.Thread(target=self.start, args=(stop,), daemon=True)
        self._thread.start()

    def _poll_once(self) -> None:
        try:
            candidate = self._read()
        except OSError:
            return
        self.publish(candidate)


def watch_file(path: str, transform: Callable[[bytes], Any] | None = None,
               poll_interval: float = 0.1) -> FileWatcher:
    return FileWatcher(path, transform, poll_interval)


# -- durations -----------------------------------------------------------------------

_DURATION_RE = re.compile(r"(\d+(?:\.\d+)?)(ms|s|m|h|us|µs)")
_UNIT_SECONDS = {"us": 1e-6, "µs": 1e-6, "ms": 1e-3, "s": 1.0, "m": 60.0, "h": 3600.0}


class BadDuration(ValueError):
    pass


def parse_duration(text: str | float | int) -> float:
    """Parse duration strings like "200ms", "2m", "1.5s" or "1m30s" into
    seconds. Bare numbers are taken as seconds."""
    if isinstance(text, (int, float)):
        return float(text)
    s = text.strip()
    if not s:
        raise BadDuration("empty duration")
    try:
        return float(s)
    except ValueError:
        pass
    pos = 0
    total = 0.0
    for match in _DURATION_RE.finditer(s):
        if match.start() != pos:
            raise BadDuration(f"cannot parse duration {text!r}")
        total += float(match.group(1)) * _UNIT_SECONDS[match.group(2)]
        pos = match.end()
    if pos != len(s):
        raise BadDuration(f"cannot parse duration {text!r}")
    return total


def format_duration(seconds: float) -> str:
    if seconds >= 1 and float(seconds).is_integer():
        return f"{int(seconds)}s"
    return f"{int(round(seconds * 1000))}ms"


def env_override(name: str, default: str | None = None) -> str | None:
    return os.environ.get(name, default)
