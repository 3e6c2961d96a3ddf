"""Workflow-manager helper: the per-task sidecar.

Drives one task instance over the NBMP task API in three phases. Create
converts the helper data file into a TDD (extended with a reporting descriptor
pointing at the local report endpoint) and posts it with a bounded retry
budget. Observe probes the task every observe period, counts consecutive
failures, pushes data-file updates as NBMP update requests and replays
recorded events into designated metadata input ports. Delete tears the task
down; the helper's exit code reflects the observed outcome.

The reports controller serves the report API and appends every received event
to the per-task event log; it outlives the task controller by a drain window
so termination events are still recorded.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field

import requests

from mediaengine import convert, nbmp
from mediaengine.config import KIND_HELPER, register_config_kind, webserver_from_dict, duration_field, InvalidConfig
from mediaengine.events import (
    EventChannel,
    EventLog,
    EventRecord,
    encode_batch,
    event_api_routes,
)
from mediaengine.httpkit import HttpServer, WebserverConfig
from mediaengine.nbmpclient import NbmpRequestError, TaskClient, retry_with_budget
from mediaengine.runtime import StopToken, Updatable

logger = logging.getLogger("mediaengine.helper")

EVENTS_PORT_PREFIX = "nme-events"
DEFAULT_TASK_API = "http://127.0.0.1:8888/v2/tasks"
REPORTS_DRAIN_WINDOW = 1.0

EXIT_OK = 0
EXIT_TASK_FAILED = 1
EXIT_API_FAULT = 2


@dataclass
class HelperConfig:
    reports_webserver: WebserverConfig = field(default_factory=lambda: WebserverConfig(bind_address="127.0.0.1:0"))
    task_api: str = DEFAULT_TASK_API
    create_request_timeout: float = 10.0
    retrieve_request_timeout: float = 10.0
    update_request_timeout: float = 10.0
    delete_request_timeout: float = 10.0
    observe_period: float = 2.0
    max_failed_probes: int = 5
    request_retry_cap: float = 60.0


def decode_helper_config(doc: dict) -> HelperConfig:
    errors: list[str] = []
    config = HelperConfig()
    config.reports_webserver = webserver_from_dict(doc.get("reportsWebserver"), errors, "reportsWebserver")
    if "taskAPI" in doc:
        config.task_api = str(doc["taskAPI"])
    for yaml_key, attr, default in (
        ("createRequestTimeout", "create_request_timeout", 10.0),
        ("retrieveRequestTimeout", "retrieve_request_timeout", 10.0),
        ("updateRequestTimeout", "update_request_timeout", 10.0),
        ("deleteRequestTimeout", "delete_request_timeout", 10.0),
        ("observePeriod", "observe_period", 2.0),
    ):
        setattr(config, attr, duration_field(doc, yaml_key, default, errors))
    if "maxFailedProbes" in doc:
        config.max_failed_probes = int(doc["maxFailedProbes"])
    if config.observe_period <= 0:
        errors.append("observePeriod must be positive")
    if config.max_failed_probes < 1:
        errors.append("maxFailedProbes must be >= 1")
    if errors:
        raise InvalidConfig(errors)
    return config


register_config_kind(KIND_HELPER, decode_helper_config)


def apply_env_overrides(config: HelperConfig) -> HelperConfig:
    """Per-job environment injected by the execution backend."""
    if os.environ.get("NME_TASK_API"):
        config.task_api = os.environ["NME_TASK_API"]
    if os.environ.get("NME_OBSERVE_PERIOD"):
        from mediaengine.runtime import parse_duration

        config.observe_period = parse_duration(os.environ["NME_OBSERVE_PERIOD"])
    if os.environ.get("NME_MAX_FAILED_PROBES"):
        config.max_failed_probes = int(os.environ["NME_MAX_FAILED_PROBES"])
    if os.environ.get("NME_REPORTS_BIND"):
        config.reports_webserver.bind_address = os.environ["NME_REPORTS_BIND"]
    return config


class PortClosed(Exception):
    pass


def replay_events(log: EventLog, subject: str, target_port_url: str,
                  timeout: float = 30.0) -> int:
    """Deliver all records present at replay start, in append order, as one
    batched CloudEvents request into the target port. Later live events are
    not replayed retroactively."""
    records = log.replay(subject)
    if not records:
        return 0
    content_type, body = encode_batch(records)
    try:
        resp = requests.post(target_port_url, data=body,
                             headers={"Content-Type": content_type}, timeout=timeout)
    except requests.RequestException as e:
        raise PortClosed(f"{target_port_url}: {e}") from e
    if resp.status_code >= 300:
        raise PortClosed(f"{target_port_url} answered {resp.status_code}")
    return len(records)


class ReportsController:
    """Report API plus event persistence, structured as an event loop."""

    def __init__(self, webserver: WebserverConfig, log: EventLog | None, subject: str):
        self.log = log
        self.subject = subject
        self.channel = EventChannel()
        self.healthy = True
        self.received: list[EventRecord] = []
        self.server = HttpServer(webserver, name="helper-reports")
        self.server.add_routes(event_api_routes(self.channel), telemetry=False)
        self.server.mount_health(self._health)

    def _health(self) -> None:
        if not self.healthy:
            raise RuntimeError("event log append failed")

    def bind(self) -> str:
        self.server.bind()
        return f"{self.server.base_url()}/events"

    def start(self, stop: StopToken) -> None:
        loop = threading.Thread(target=self._event_loop, daemon=True)
        loop.start()
        try:
            self.server.start(stop)
        finally:
            self.channel.close()
            loop.join(timeout=2)

    def _event_loop(self) -> None:
        while True:
            record = self.channel.get(timeout=0.2)
            if record is None:
                if self.channel.closed:
                    return
                continue
            self.received.append(record)
            if self.log is not None:
                try:
                    self.log.append(self.subject, record)
                except Exception:
                    logger.exception("appending event %s failed", record.id)
                    self.healthy = False


class Helper:
    """One task instance lifecycle."""

    def __init__(self, config: HelperConfig, data: Updatable):
        self.config = config
        self.data = data
        self.client = TaskClient(config.task_api, timeout=config.retrieve_request_timeout)
        self.instance_id: str | None = None
        self.observed_success = False
        self.observed_error = ""
        self.update_requests = 0
        self.observe_started_at = 0.0
        self.observe_duration = 0.0
        value = data.get().value
        event_log_cfg = (value or {}).get("eventLog") or {}
        log = EventLog(event_log_cfg["root"]) if event_log_cfg.get("root") else None
        self.log = log
        self.subject = event_log_cfg.get("subject", "")
        self.reports = ReportsController(config.reports_webserver, log, self.subject)

    # -- phases ---------------------------------------------------------------

    def run(self, stop: StopToken) -> int:
        report_url = self.reports.bind()
        reports_stop = StopToken()  # decoupled: outlives the task controller
        reports_thread = threading.Thread(target=self.reports.start, args=(reports_stop,), daemon=True)
        reports_thread.start()
        try:
            exit_code = self._run_task_controller(stop, report_url)
        finally:
            time.sleep(REPORTS_DRAIN_WINDOW if not stop.stopped else 0.05)
            reports_stop.stop()
            reports_thread.join(timeout=5)
        return exit_code

    def _run_task_controller(self, stop: StopToken, report_url: str) -> int:
        try:
            created = self._phase_create(stop, report_url)
        except NbmpRequestError as e:
            logger.error("create request budget exhausted: %s", e)
            return EXIT_API_FAULT
        if created is None:  # cancelled
            return EXIT_API_FAULT
        self.instance_id = created.general.id
        error = self._phase_observe(stop)
        delete_ok = self._phase_delete(stop)
        if error:
            logger.error("task observed as failed: %s", error)
            return EXIT_TASK_FAILED
        if not delete_ok:
            return EXIT_API_FAULT
        return EXIT_OK

    def _phase_create(self, stop: StopToken, report_url: str) -> nbmp.Description | None:
        tdd = convert.build_tdd(self.data.get().value, report_url=report_url)

        def attempt():
            if stop.stopped:
                raise NbmpRequestError("cancelled")
            return self.client.create(tdd, timeout=self.config.create_request_timeout)

        return retry_with_budget(attempt, total_cap=self.config.request_retry_cap)

    def _phase_observe(self, stop: StopToken) -> str:
        """Returns an error message, or empty when the task ended normally."""
        _, updates = self.data.subscribe()
        self._replay_into_event_ports()
        failures = 0
        self.observe_started_at = time.monotonic()
        next_probe = self.observe_started_at + self.config.observe_period
        while not stop.stopped:
            now = time.monotonic()
            if now >= next_probe:
                next_probe += self.config.observe_period
                outcome = self._probe()
                if outcome == "ok":
                    failures = 0
                elif outcome == "destroyed":
                    self.observed_success = True
                    self.observe_duration = time.monotonic() - self.observe_started_at
                    return ""
                elif outcome == "error":
                    self.observe_duration = time.monotonic() - self.observe_started_at
                    return "task reported the error state"
                else:
                    failures += 1
                    if failures >= self.config.max_failed_probes:
                        self.observe_duration = time.monotonic() - self.observe_started_at
                        return f"{failures} consecutive probes failed"
            self._handle_data_updates(updates)
            wait = min(0.01, max(0.0, next_probe - time.monotonic()))
            time.sleep(wait)
        return "cancelled"

    def _probe(self) -> str:
        try:
            d = self.client.retrieve(self.instance_id, timeout=self.config.retrieve_request_timeout)
        except NbmpRequestError:
            return "failed"
        except Exception:
            return "failed"
        state = d.general.state
        if state == nbmp.DESTROYED:
            return "destroyed"
        if state == nbmp.ERROR:
            return "error"
        return "ok"

    def _handle_data_updates(self, updates) -> None:
        import queue as _queue

        latest = None
        while True:
            try:
                item = updates.get_nowait()
            except _queue.Empty:
                break
            if item is not None and item.error is None:
                latest = item
        if latest is None:
            return
        tdd = convert.build_tdd(latest.value, report_url=self.reports.bind())
        tdd.general.id = self.instance_id
        try:
            self.client.update(tdd, timeout=self.config.update_request_timeout)
            self.update_requests += 1
        except NbmpRequestError as e:
            logger.warning("task update request failed: %s", e)

    def _replay_into_event_ports(self) -> None:
        if self.log is None or not self.subject:
            return
        value = self.data.get().value or {}
        for binding in (value.get("task") or {}).get("inputPortBindings") or []:
            if not str(binding.get("portName", "")).startswith(EVENTS_PORT_PREFIX):
                continue
            url = (binding.get("media") or {}).get("url", "")
            if not url:
                continue
            try:
                count = replay_events(self.log, self.subject, url)
                logger.info("replayed %d events into %s", count, binding.get("portName"))
            except PortClosed as e:
                logger.warning("event replay failed: %s", e)

    def _phase_delete(self, stop: StopToken) -> bool:
        def attempt():
            return self.client.delete(self.instance_id, timeout=self.config.delete_request_timeout)

        try:
            retry_with_budget(attempt, total_cap=self.config.request_retry_cap,
                              give_up_on=lambda e: e.status == 404)
            return True
        except NbmpRequestError as e:
            if e.status == 404:
                return True  # already gone
            logger.error("delete request budget exhausted: %s", e)
            return False


def run_helper(config: HelperConfig, data: Updatable, stop: StopToken | None = None) -> int:
    return Helper(config, data).run(stop or StopToken())
