from __future__ import annotations

import json
import threading
import time

import pytest
import requests

from mediaengine import nbmp
from mediaengine.events import EventLog, EventRecord, decode_http_request
from mediaengine.helper import (
    EXIT_API_FAULT,
    EXIT_OK,
    EXIT_TASK_FAILED,
    Helper,
    HelperConfig,
    PortClosed,
    replay_events,
)
from mediaengine.httpkit import HttpServer, Request, Response, ServerHandle, WebserverConfig
from mediaengine.runtime import StopToken, Updatable, VersionedValue


class ScriptedShim:
    """Task API stub whose retrieve responses follow a script.

    Script entries: "ok", "fail" (connection-level error via 500),
    "destroyed", "error". The last entry repeats forever.
    """

    def __init__(self, script: list[str]):
        self.script = script
        self.probes = 0
        self.creates = 0
        self.updates: list[dict] = []
        self.deletes = 0
        self.server = HttpServer(WebserverConfig(bind_address="127.0.0.1:0"))
        self.server.add_routes([
            ("POST", "/v2/tasks", self._create),
            ("GET", "/v2/tasks/{id}", self._retrieve),
            ("PATCH", "/v2/tasks/{id}", self._update),
            ("DELETE", "/v2/tasks/{id}", self._delete),
        ], telemetry=False)

    def _create(self, request: Request) -> Response:
        self.creates += 1
        d = nbmp.parse_document(request.body(), nbmp.TDD)
        if not d.general.id:
            d.general.id = "instance-1"
        d.general.state = "running"
        return Response(201, headers={"Content-Type": "application/json"}, body=d.serialize())

    def _entry(self) -> str:
        index = min(self.probes, len(self.script) - 1)
        return self.script[index]

    def _retrieve(self, request: Request) -> Response:
        entry = self._entry()
        self.probes += 1
        if entry == "fail":
            return Response.text(500, "scripted failure")
        state = {"ok": "running", "destroyed": "destroyed", "error": "error"}[entry]
        doc = {"general": {"id": request.params["id"], "state": state}}
        return Response(200, headers={"Content-Type": "application/json"},
                        body=json.dumps(doc).encode())

    def _update(self, request: Request) -> Response:
        self.updates.append(json.loads(request.body()))
        return Response(200, headers={"Content-Type": "application/json"}, body=request.body())

    def _delete(self, request: Request) -> Response:
        self.deletes += 1
        doc = {"general": {"id": request.params["id"], "state": "destroyed"}}
        return Response(200, headers={"Content-Type": "application/json"}, body=json.dumps(doc).encode())


def helper_data(task_id="t-1", event_log_root="", subject="events.wf.t-1", bindings=None):
    data = {
        "apiVersion": "engine.nagare.media/v1alpha1",
        "kind": "WorkflowManagerHelperData",
        "workflow": {"id": "wf", "name": ""},
        "task": {
            "id": task_id,
            "inputPortBindings": bindings or [],
            "outputPortBindings": [],
            "config": {"k": "v"},
        },
    }
    if event_log_root:
        data["eventLog"] = {"root": event_log_root, "subject": subject}
    return data


class StaticUpdatable(Updatable):
    def __init__(self, value):
        super().__init__(VersionedValue(version="v1", value=value))


def run_helper_against(shim: ScriptedShim, config: HelperConfig, data: dict):
    with ServerHandle(shim.server) as handle:
        config.task_api = f"{handle.base_url()}/v2/tasks"
        updatable = StaticUpdatable(data)
        helper = Helper(config, updatable)
        stop = StopToken()
        code = helper.run(stop)
        return code, helper


def fast_config(period=0.05, probes=3, retry_cap=2.0):
    return HelperConfig(observe_period=period, max_failed_probes=probes, request_retry_cap=retry_cap)


class TestLifecycle:
    def test_healthy_then_destroyed_exits_zero(self, tmp_path):
        shim = ScriptedShim(["ok", "ok", "destroyed"])
        code, helper = run_helper_against(shim, fast_config(), helper_data(event_log_root=str(tmp_path)))
        assert code == EXIT_OK
        assert shim.creates == 1
        assert shim.deletes == 1
        assert helper.observed_success

    def test_error_state_exits_nonzero_and_deletes(self, tmp_path):
        shim = ScriptedShim(["ok", "error"])
        code, _ = run_helper_against(shim, fast_config(), helper_data(event_log_root=str(tmp_path)))
        assert code == EXIT_TASK_FAILED
        assert shim.deletes == 1

    def test_exactly_one_create_and_one_delete(self, tmp_path):
        shim = ScriptedShim(["destroyed"])
        _, _ = run_helper_against(shim, fast_config(), helper_data(event_log_root=str(tmp_path)))
        assert shim.creates == 1
        assert shim.deletes == 1

    def test_create_budget_exhaustion_fails_fast(self):
        config = fast_config(retry_cap=0.3)
        config.task_api = "http://127.0.0.1:9/v2/tasks"  # unroutable
        helper = Helper(config, StaticUpdatable(helper_data()))
        started = time.monotonic()
        code = helper.run(StopToken())
        assert code == EXIT_API_FAULT
        assert time.monotonic() - started < 10


class TestProbes:
    def test_failure_declared_after_exactly_max_failed_probes(self):
        # criterion: observePeriod 50ms, maxFailedProbes 3 -> failure declared
        # within the 150-300ms window of the observe phase
        shim = ScriptedShim(["fail"])
        config = fast_config(period=0.05, probes=3)
        code, helper = run_helper_against(shim, config, helper_data())
        assert code == EXIT_TASK_FAILED
        assert shim.probes == 3
        assert 0.15 <= helper.observe_duration <= 0.30

    def test_single_success_resets_counter(self):
        script = ["fail", "ok", "fail", "ok", "fail", "ok", "destroyed"]
        shim = ScriptedShim(script)
        code, _ = run_helper_against(shim, fast_config(period=0.02, probes=2), helper_data())
        assert code == EXIT_OK
        assert shim.probes == len(script)


class TestDataUpdates:
    def test_data_update_sends_one_update_request(self, tmp_path):
        shim = ScriptedShim(["ok"] * 8 + ["destroyed"])
        config = fast_config(period=0.05)
        with ServerHandle(shim.server) as handle:
            config.task_api = f"{handle.base_url()}/v2/tasks"
            updatable = StaticUpdatable(helper_data())
            helper = Helper(config, updatable)
            result = {}

            def run():
                result["code"] = helper.run(StopToken())

            t = threading.Thread(target=run, daemon=True)
            t.start()
            time.sleep(0.12)
            new_data = helper_data()
            new_data["task"]["config"] = {"k": "v2"}
            updatable.publish(VersionedValue(version="v2", value=new_data))
            t.join(timeout=10)
        assert result["code"] == EXIT_OK
        assert len(shim.updates) == 1
        params = shim.updates[0]["configuration"]["parameters"]
        assert {"name": "k", "values": ["v2"]} in params

    def test_update_storm_coalesces(self, tmp_path):
        shim = ScriptedShim(["ok"] * 10 + ["destroyed"])
        config = fast_config(period=0.05)
        with ServerHandle(shim.server) as handle:
            config.task_api = f"{handle.base_url()}/v2/tasks"
            updatable = StaticUpdatable(helper_data())
            helper = Helper(config, updatable)
            result = {}
            t = threading.Thread(target=lambda: result.setdefault("code", helper.run(StopToken())), daemon=True)
            t.start()
            time.sleep(0.1)
            for i in range(10):
                new_data = helper_data()
                new_data["task"]["config"] = {"k": f"v{i}"}
                updatable.publish(VersionedValue(version=f"s{i}", value=new_data))
            t.join(timeout=10)
        assert 1 <= len(shim.updates) <= 10
        last = shim.updates[-1]["configuration"]["parameters"]
        assert {"name": "k", "values": ["v9"]} in last


class TestReports:
    def test_reports_appended_to_log_and_survive_helper_exit(self, tmp_path):
        shim = ScriptedShim(["ok"] * 6 + ["destroyed"])
        config = fast_config(period=0.05)
        log_root = str(tmp_path)
        with ServerHandle(shim.server) as handle:
            config.task_api = f"{handle.base_url()}/v2/tasks"
            updatable = StaticUpdatable(helper_data(event_log_root=log_root))
            helper = Helper(config, updatable)
            report_url_box = {}
            result = {}

            def run():
                result["code"] = helper.run(StopToken())

            t = threading.Thread(target=run, daemon=True)
            t.start()
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline and helper.reports.server._server is None:
                time.sleep(0.01)
            report_url = helper.reports.bind()
            report_url_box["url"] = report_url
            for i in range(2):
                record = EventRecord.new(source="/fn", type=f"com.example.e{i}")
                body = json.dumps([record.to_json()]).encode()
                resp = requests.post(report_url, data=body,
                                     headers={"Content-Type": "application/cloudevents-batch+json"}, timeout=5)
                assert resp.status_code in (200, 202)
            t.join(timeout=10)
        assert result["code"] == EXIT_OK
        log = EventLog(log_root)
        replayed = log.replay("events.wf.t-1")
        assert [e.type for e in replayed] == ["com.example.e0", "com.example.e1"]


class TestReplay:
    def make_port_stub(self):
        received: list = []

        def handler(request: Request) -> Response:
            records = decode_http_request(request.headers, request.body())
            received.extend(records)
            return Response.text(200, "ok")

        server = HttpServer(WebserverConfig(bind_address="127.0.0.1:0"))
        server.add_route("POST", "/nme-events", handler)
        return server, received

    def test_empty_log_delivers_zero(self, tmp_path):
        log = EventLog(str(tmp_path))
        server, received = self.make_port_stub()
        with ServerHandle(server) as handle:
            count = replay_events(log, "events.wf.x", f"{handle.base_url()}/nme-events")
        assert count == 0
        assert received == []

    def test_five_prior_events_delivered_in_order(self, tmp_path):
        log = EventLog(str(tmp_path))
        written = [EventRecord.new(source="/fn", type=f"com.example.e{i}") for i in range(5)]
        for e in written:
            log.append("events.wf.t", e)
        server, received = self.make_port_stub()
        with ServerHandle(server) as handle:
            count = replay_events(log, "events.wf.t", f"{handle.base_url()}/nme-events")
        assert count == 5
        assert [e.id for e in received] == [e.id for e in written]

    def test_closed_port_raises(self, tmp_path):
        log = EventLog(str(tmp_path))
        log.append("s", EventRecord.new(source="/fn", type="com.example.x"))
        with pytest.raises(PortClosed):
            replay_events(log, "s", "http://127.0.0.1:9/nme-events", timeout=0.5)

    def test_instance2_sees_instance1_events(self, tmp_path):
        # restart harness: instance 1 records e1..e3, instance 2 replays them
        log_root = str(tmp_path)
        log = EventLog(log_root)
        for i in range(3):
            log.append("events.wf.t-1", EventRecord.new(source="/fn", type=f"com.example.e{i}"))

        port_server, received = self.make_port_stub()
        with ServerHandle(port_server) as port_handle:
            bindings = [{"portName": "nme-events-in",
                         "media": {"id": "ev", "type": "metadata", "direction": "push",
                                   "url": f"{port_handle.base_url()}/nme-events"}}]
            shim = ScriptedShim(["destroyed"])
            code, _ = run_helper_against(
                shim, fast_config(),
                helper_data(event_log_root=log_root, bindings=bindings))
            assert code == EXIT_OK
        assert [e.type for e in received] == ["com.example.e0", "com.example.e1", "com.example.e2"]
