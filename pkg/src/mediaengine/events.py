"""Event reporting and persistence.

CloudEvents-shaped records, the HTTP request codec for structured and batched
content modes, sending clients (direct HTTP, retrying wrapper, discard) and an
append-only per-subject event log with ordered, restartable replay.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

import requests

CONTENT_TYPE_STRUCTURED = "application/cloudevents+json"
CONTENT_TYPE_BATCH = "application/cloudevents-batch+json"
SPEC_VERSION = "1.0"


class EventError(Exception):
    pass


class UnsupportedMode(EventError):
    """Binary content mode is not implemented; use structured or batched."""


class MalformedEvent(EventError):
    pass


class DeliveryFailed(EventError):
    pass


class LogCorrupt(EventError):
    pass


@dataclass
class EventRecord:
    id: str
    source: str
    type: str
    time: str = ""
    datacontenttype: str = ""
    subject: str = ""
    data: Any = None
    extensions: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def new(cls, source: str, type: str, data: Any = None, subject: str = "") -> "EventRecord":
        return cls(
            id=uuid.uuid4().hex,
            source=source,
            type=type,
            time=_now_rfc3339(),
            datacontenttype="application/json" if data is not None else "",
            subject=subject,
            data=data,
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "specversion": SPEC_VERSION,
            "id": self.id,
            "source": self.source,
            "type": self.type,
        }
        if self.time:
            out["time"] = self.time
        if self.subject:
            out["subject"] = self.subject
        if self.datacontenttype:
            out["datacontenttype"] = self.datacontenttype
        if self.data is not None:
            out["data"] = self.data
        out.update(sorted(self.extensions.items()))
        return out

    @classmethod
    def from_json(cls, obj: Any) -> "EventRecord":
        if not isinstance(obj, dict):
            raise MalformedEvent("event must be a JSON object")
        missing = [k for k in ("id", "source", "type") if not obj.get(k)]
        if missing:
            raise MalformedEvent(f"missing required attributes: {', '.join(missing)}")
        known = {"specversion", "id", "source", "type", "time", "subject", "datacontenttype", "data"}
        return cls(
            id=obj["id"],
            source=obj["source"],
            type=obj["type"],
            time=obj.get("time", ""),
            subject=obj.get("subject", ""),
            datacontenttype=obj.get("datacontenttype", ""),
            data=obj.get("data"),
            extensions={k: v for k, v in obj.items() if k not in known},
        )


def _now_rfc3339() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# -- HTTP codec -----------------------------------------------------------------

def decode_http_request(headers: dict[str, str], body: bytes) -> list[EventRecord]:
    """Decode a structured (one object) or batched (array) CloudEvents request.

    All records decode or the request is rejected atomically.
    """
    content_type = ""
    for k, v in headers.items():
        if k.lower() == "content-type":
            content_type = v.split(";")[0].strip().lower()
            break
    if content_type == CONTENT_TYPE_STRUCTURED:
        return [EventRecord.from_json(_parse_json(body))]
    if content_type == CONTENT_TYPE_BATCH:
        arr = _parse_json(body)
        if not isinstance(arr, list):
            raise MalformedEvent("batched mode requires a JSON array")
        return [EventRecord.from_json(item) for item in arr]
    if any(k.lower().startswith("ce-") for k in headers):
        raise UnsupportedMode("binary content mode is not supported")
    raise UnsupportedMode(f"unsupported content type {content_type!r}")


def _parse_json(body: bytes) -> Any:
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedEvent(str(e)) from e


def encode_structured(event: EventRecord) -> tuple[str, bytes]:
    return CONTENT_TYPE_STRUCTURED, json.dumps(event.to_json(), separators=(",", ":")).encode()


def encode_batch(events: list[EventRecord]) -> tuple[str, bytes]:
    return CONTENT_TYPE_BATCH, json.dumps([e.to_json() for e in events], separators=(",", ":")).encode()


# -- clients --------------------------------------------------------------------

class Client:
    def send(self, events: list[EventRecord]) -> None:
        raise NotImplementedError

    def send_async_ack(self, events: list[EventRecord]) -> None:
        raise NotImplementedError


class DiscardClient(Client):
    """Drops events and always succeeds; useful when no reporting is wired."""

    def send(self, events: list[EventRecord]) -> None:
        pass

    def send_async_ack(self, events: list[EventRecord]) -> None:
        pass


class HttpClient(Client):
    def __init__(self, endpoint: str, timeout: float = 10.0, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self._session = session or requests.Session()

    def _post(self, events: list[EventRecord], async_ack: bool) -> None:
        if len(events) == 1:
            content_type, body = encode_structured(events[0])
        else:
            content_type, body = encode_batch(events)
        url = self.endpoint
        if async_ack:
            url += ("&" if "?" in url else "?") + "async=true"
        try:
            resp = self._session.post(url, data=body, headers={"Content-Type": content_type}, timeout=self.timeout)
        except requests.RequestException as e:
            raise DeliveryFailed(str(e)) from e
        if resp.status_code >= 300:
            raise DeliveryFailed(f"event endpoint answered {resp.status_code}")

    def send(self, events: list[EventRecord]) -> None:
        self._post(events, async_ack=False)

    def send_async_ack(self, events: list[EventRecord]) -> None:
        self._post(events, async_ack=True)


@dataclass
class BackoffPolicy:
    """Retry with exponential backoff, capped per delay and in total."""

    initial_delay: float = 0.25
    factor: float = 2.0
    max_delay: float = 10.0
    total_cap: float = 60.0

    def delays(self):
        elapsed = 0.0
        delay = self.initial_delay
        while True:
            if elapsed + delay > self.total_cap:
                remaining = self.total_cap - elapsed
                if remaining <= 0:
                    return
                yield remaining
                return
            yield delay
            elapsed += delay
            delay = min(delay * self.factor, self.max_delay)


class BackoffClient(Client):
    """Wraps another client and retries on error with exponential backoff.

    A configurable attempt budget bounds total retries (the delay curve is
    additionally capped by the policy's total duration).
    """

    def __init__(self, wrapped: Client, policy: BackoffPolicy | None = None,
                 max_attempts: int | None = None, sleep: Callable[[float], None] = time.sleep):
        self.wrapped = wrapped
        self.policy = policy or BackoffPolicy()
        self.max_attempts = max_attempts
        self._sleep = sleep

    def _retry(self, op: Callable[[], None]) -> None:
        attempts = 0
        last: Exception | None = None
        delays = self.policy.delays()
        while True:
            attempts += 1
            try:
                op()
                return
            except EventError as e:
                last = e
            if self.max_attempts is not None and attempts >= self.max_attempts:
                break
            try:
                delay = next(delays)
            except StopIteration:
                break
            self._sleep(delay)
        raise DeliveryFailed(f"gave up after {attempts} attempts: {last}")

    def send(self, events: list[EventRecord]) -> None:
        self._retry(lambda: self.wrapped.send(events))

    def send_async_ack(self, events: list[EventRecord]) -> None:
        self._retry(lambda: self.wrapped.send_async_ack(events))


# -- HTTP event API -----------------------------------------------------------------

class ConsumerClosed(EventError):
    pass


class EventChannel:
    """Hands decoded events from the API handler to a consumer loop.

    Rendezvous semantics: deliver() returns only once the consumer has
    dequeued the record, so in sync mode the HTTP response is deferred until
    acceptance (deliberate backpressure). Closing the channel makes pending
    and future deliveries fail with ConsumerClosed.
    """

    def __init__(self):
        import collections

        self._cond = threading.Condition()
        self._items: Any = collections.deque()
        self._enqueued = 0
        self._accepted = 0
        self._closed = False

    def deliver(self, record: EventRecord) -> None:
        with self._cond:
            if self._closed:
                raise ConsumerClosed("event consumer is closed")
            self._enqueued += 1
            my_seq = self._enqueued
            self._items.append(record)
            self._cond.notify_all()
            while self._accepted < my_seq:
                if self._closed:
                    raise ConsumerClosed("event consumer closed while delivering")
                self._cond.wait()

    def get(self, timeout: float | None = None) -> EventRecord | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._items:
                if self._closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(timeout=remaining)
            item = self._items.popleft()
            self._accepted += 1
            self._cond.notify_all()
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


def event_api_routes(channel: EventChannel):
    """Routes serving POST /events in structured and batched content modes.

    With ?async=true the handler answers 202 directly after decoding and the
    records are forwarded outside the request context.
    """
    from mediaengine.httpkit import Request, Response

    def handle_post(request: Request) -> Response:
        try:
            records = decode_http_request(request.headers, request.body())
        except (MalformedEvent, UnsupportedMode) as e:
            return Response.text(400, str(e))
        if request.query.get("async") == "true":
            if channel.closed:
                return Response.text(503, "event consumer is closed")
            threading.Thread(target=_deliver_all, args=(channel, records), daemon=True).start()
            return Response.text(202, "accepted")
        try:
            for record in records:
                channel.deliver(record)
        except ConsumerClosed as e:
            return Response.text(503, str(e))
        return Response.text(200, f"received {len(records)} events")

    return [("POST", "/events", handle_post)]


def _deliver_all(channel: EventChannel, records: list[EventRecord]) -> None:
    try:
        for record in records:
            channel.deliver(record)
    except ConsumerClosed:
        pass


# -- append-only event log ---------------------------------------------------------

class EventLog:
    """Per-subject append-only files with length-prefixed, checksummed JSON
    records. Replay returns records in append order and survives restart.

    Appends are idempotent per (id, source): a duplicate append returns the
    original sequence number.
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._lock = threading.Lock()
        self._index: dict[str, dict[tuple[str, str], int]] = {}
        self._counts: dict[str, int] = {}

    def _path(self, subject: str) -> str:
        safe = subject.replace("/", "_")
        return os.path.join(self.root, safe + ".log")

    def _ensure_loaded(self, subject: str) -> None:
        if subject in self._index:
            return
        index: dict[tuple[str, str], int] = {}
        count = 0
        path = self._path(subject)
        if os.path.exists(path):
            for record in self._read_all(path):
                count += 1
                index[(record.id, record.source)] = count
        self._index[subject] = index
        self._counts[subject] = count

    @staticmethod
    def _read_all(path: str) -> list[EventRecord]:
        records = []
        with open(path, "rb") as f:
            for line_no, line in enumerate(f, 1):
                line = line.rstrip(b"\n")
                if not line:
                    continue
                parts = line.split(b" ", 2)
                if len(parts) != 3:
                    raise LogCorrupt(f"{path}:{line_no}: malformed record")
                length, digest, payload = parts
                try:
                    expected_len = int(length)
                except ValueError as e:
                    raise LogCorrupt(f"{path}:{line_no}: bad length prefix") from e
                if len(payload) != expected_len:
                    raise LogCorrupt(f"{path}:{line_no}: length mismatch")
                if hashlib.sha256(payload).hexdigest().encode() != digest:
                    raise LogCorrupt(f"{path}:{line_no}: checksum mismatch")
                records.append(EventRecord.from_json(json.loads(payload.decode())))
        return records

    def append(self, subject: str, record: EventRecord) -> int:
        with self._lock:
            self._ensure_loaded(subject)
            key = (record.id, record.source)
            existing = self._index[subject].get(key)
            if existing is not None:
                return existing
            payload = json.dumps(record.to_json(), separators=(",", ":")).encode()
            digest = hashlib.sha256(payload).hexdigest().encode()
            line = b"%d %s %s\n" % (len(payload), digest, payload)
            with open(self._path(subject), "ab") as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            seq = self._counts[subject] + 1
            self._counts[subject] = seq
            self._index[subject][key] = seq
            return seq

    def replay(self, subject: str) -> list[EventRecord]:
        with self._lock:
            path = self._path(subject)
            if not os.path.exists(path):
                return []
            return self._read_all(path)

    def subjects(self) -> list[str]:
        return sorted(f[:-4] for f in os.listdir(self.root) if f.endswith(".log"))


def task_subject(workflow_name: str, task_name: str) -> str:
    return f"events.{workflow_name}.{task_name}"
