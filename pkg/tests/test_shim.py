from __future__ import annotations

import json
import sys
import threading
import time

import pytest
import requests

from mediaengine import nbmp, template
from mediaengine.events import EventChannel, event_api_routes
from mediaengine.httpkit import HttpServer, ServerHandle, WebserverConfig
from mediaengine.runtime import StopToken
from mediaengine.shim import (
    ActionSpec,
    TaskShim,
    TaskShimConfig,
    render_action_config,
)


# -- template engine -----------------------------------------------------------


class TestTemplate:
    def test_dotted_path_lookup(self):
        ctx = {"Task": {"general": {"id": "t1"}}}
        assert template.render("path: /tmp/{{ .Task.General.ID }}", ctx) == "path: /tmp/t1"

    def test_missing_field_is_error(self):
        with pytest.raises(template.TemplateError):
            template.render("{{ .Task.Nope }}", {"Task": {}})

    def test_to_json_helper(self):
        ctx = {"Task": {"general": {"id": "t1"}}}
        out = template.render("{{ toJson .Task }}", ctx)
        assert json.loads(out) == {"general": {"id": "t1"}}

    def test_default_helper(self):
        ctx = {"Task": {"general": {"id": "t1"}}}
        assert template.render('{{ default "fallback" .Task.Missing }}', ctx) == "fallback"
        assert template.render('{{ default "fallback" .Task.General.ID }}', ctx) == "t1"

    def test_trim_and_env_helpers(self, monkeypatch):
        monkeypatch.setenv("NME_TEST_VALUE", "hello")
        assert template.render('{{ env "NME_TEST_VALUE" }}', {}) == "hello"
        assert template.render('{{ trim "  x  " }}', {}) == "x"

    def test_kebab_folding(self):
        ctx = {"Task": {"general": {"input-ports": [{"port-name": "in"}]}}}
        assert template.render("{{ .Task.General.InputPorts.0.PortName }}", ctx) == "in"


class TestRenderActionConfig:
    def test_object_config_verbatim(self):
        spec = ActionSpec("a", "file", {"path": "/tmp/x"})
        assert render_action_config(spec, {}) == {"path": "/tmp/x"}

    def test_string_config_rendered_and_parsed(self):
        spec = ActionSpec("a", "file", "path: /tmp/{{ .Task.General.ID }}\ncontent: hi")
        out = render_action_config(spec, {"Task": {"general": {"id": "t1"}}})
        assert out == {"path": "/tmp/t1", "content": "hi"}

    def test_unparseable_output(self):
        spec = ActionSpec("a", "file", "just a string, not a mapping")
        with pytest.raises(template.OutputNotParseable):
            render_action_config(spec, {})

    def test_template_error_propagates(self):
        spec = ActionSpec("a", "file", "path: {{ .Missing.Field }}")
        with pytest.raises(template.TemplateError):
            render_action_config(spec, {})


# -- shim harness ------------------------------------------------------------------


def make_tdd(task_id="t-1", report_url="", config=None):
    doc = {"general": {"id": task_id}}
    if report_url:
        doc["reporting"] = {"url": report_url, "report-type": "nagare-media-engine-cloudevents",
                            "delivery-method": "HTTP_POST"}
    if config:
        doc["configuration"] = {"parameters": [{"name": k, "values": [v]} for k, v in config.items()]}
    return json.dumps(doc).encode()


class ShimHarness:
    def __init__(self, config: TaskShimConfig | None = None):
        self.config = config or TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        self.config.webserver.bind_address = "127.0.0.1:0"
        self.shim = TaskShim(self.config)
        self.stop = StopToken()
        self.exit_code: int | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self.shim.server.bind()
        self.base = f"http://127.0.0.1:{self.shim.server.port}"
        self._thread.start()
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            try:
                requests.get(self.base + "/healthz", timeout=1)
                break
            except requests.RequestException:
                time.sleep(0.02)

    def _run(self):
        self.exit_code = self.shim.run(self.stop)

    def create(self, body=None, **kw):
        return requests.post(self.base + "/v2/tasks", data=body or make_tdd(**kw),
                             headers={"Content-Type": "application/json"}, timeout=5)

    def wait_exit(self, timeout=10.0) -> int:
        self._thread.join(timeout=timeout)
        assert not self._thread.is_alive(), "shim never exited"
        return self.exit_code

    def shutdown(self):
        self.stop.stop()
        self._thread.join(timeout=5)


@pytest.fixture()
def noop_shim():
    config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
    config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "pass"]})]
    config.create_timeout = 30
    config.delete_timeout = 30
    h = ShimHarness(config)
    yield h
    h.shutdown()


class TestTaskService:
    def test_create_then_create_is_409(self, noop_shim):
        assert noop_shim.create(task_id="t-1").status_code == 201
        resp = noop_shim.create(task_id="t-1")
        assert resp.status_code == 409
        body = nbmp.parse_document(resp.content, nbmp.TDD)
        assert body.acknowledge.status == "failed"

    def test_update_before_create_is_error(self, noop_shim):
        resp = requests.patch(noop_shim.base + "/v2/tasks/t-1", data=make_tdd(), timeout=5)
        assert resp.status_code == 404

    def test_retrieve_reflects_live_state(self, noop_shim):
        noop_shim.create(task_id="t-1")
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            resp = requests.get(noop_shim.base + "/v2/tasks/t-1", timeout=5)
            d = nbmp.parse_document(resp.content, nbmp.TDD)
            if d.general.state == "destroyed":
                return
            time.sleep(0.02)
        raise AssertionError("task never reported destroyed after the function finished")

    def test_invalid_tdd_400(self, noop_shim):
        resp = noop_shim.create(body=b"{nope")
        assert resp.status_code == 400

    def test_action_failure_500_with_acknowledge(self):
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.on_create_actions = [ActionSpec("boom", "exec", {"command": ["/nonexistent-cmd"]})]
        h = ShimHarness(config)
        try:
            resp = h.create(task_id="t-1")
            assert resp.status_code == 500
            body = nbmp.parse_document(resp.content, nbmp.TDD)
            assert body.acknowledge.status == "failed"
        finally:
            h.shutdown()

    def test_delete_finishes_shim_with_exit_zero(self, noop_shim):
        noop_shim.create(task_id="t-1")
        noop_shim.shim.terminal_event.wait(timeout=5)
        resp = requests.delete(noop_shim.base + "/v2/tasks/t-1", timeout=5)
        assert resp.status_code == 200
        assert noop_shim.wait_exit() == 0


class TestTimeouts:
    def test_no_create_within_timeout_exits_nonzero(self):
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.create_timeout = 0.3
        h = ShimHarness(config)
        assert h.wait_exit(timeout=5) != 0

    def test_no_delete_after_success_exits_nonzero(self):
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "pass"]})]
        config.create_timeout = 30
        config.delete_timeout = 0.3
        h = ShimHarness(config)
        h.create(task_id="t-1")
        assert h.wait_exit(timeout=10) != 0

    def test_failed_function_exits_nonzero_after_delete(self):
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "raise SystemExit(3)"]})]
        config.create_timeout = 30
        config.delete_timeout = 30
        h = ShimHarness(config)
        h.create(task_id="t-1")
        h.shim.terminal_event.wait(timeout=5)
        requests.delete(h.base + "/v2/tasks/t-1", timeout=5)
        assert h.wait_exit() == 1


class TestActions:
    def test_file_action_writes_rendered_tdd(self, tmp_path):
        target = tmp_path / "tdd.json"
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.on_create_actions = [
            ActionSpec("write tdd", "file", f"path: {target}\ncontent: |\n  {{{{ toJson .Task }}}}"),
            ActionSpec("start", "meta", "start-task"),
        ]
        config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "pass"]})]
        h = ShimHarness(config)
        try:
            assert h.create(task_id="t-5").status_code == 201
            written = json.loads(target.read_text())
            assert written["general"]["id"] == "t-5"
        finally:
            h.shutdown()

    def test_exec_args_templated_from_config(self, tmp_path):
        # argv-echo stub records its arguments
        out = tmp_path / "argv"
        echo = f"import sys; open({str(out)!r}, 'w').write(' '.join(sys.argv[1:]))"
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.actions = [ActionSpec("run", "exec",
                                     "command: " + sys.executable + "\n"
                                     f"args: ['-c', {echo!r}, '{{{{ .Config.quality }}}}']")]
        h = ShimHarness(config)
        try:
            h.create(task_id="t-6", config={"quality": "7"})
            h.shim.terminal_event.wait(timeout=5)
            assert out.read_text() == "7"
        finally:
            h.shutdown()

    def test_restart_creates_new_process_identity(self, tmp_path):
        pidfile = tmp_path / "pids"
        code = f"import os, time; open({str(pidfile)!r}, 'a').write(str(os.getpid()) + '\\n'); time.sleep(30)"
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", code]})]
        h = ShimHarness(config)
        try:
            h.create(task_id="t-7")
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline and (not pidfile.exists() or not pidfile.read_text().strip()):
                time.sleep(0.02)
            resp = requests.patch(h.base + "/v2/tasks/t-7", data=make_tdd(task_id="t-7"), timeout=10)
            assert resp.status_code == 200
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline and len(pidfile.read_text().split()) < 2:
                time.sleep(0.02)
            pids = pidfile.read_text().split()
            assert len(pids) >= 2
            assert pids[0] != pids[1]
        finally:
            h.shutdown()

    def test_stop_when_never_started_is_noop(self):
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.on_create_actions = [ActionSpec("stop", "meta", "stop-task")]
        h = ShimHarness(config)
        try:
            assert h.create(task_id="t-8").status_code == 201
        finally:
            h.shutdown()

    def test_double_start_is_already_running(self):
        config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
        config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "import time; time.sleep(5)"]})]
        config.on_create_actions = [ActionSpec("start", "meta", "start-task"),
                                    ActionSpec("start again", "meta", "start-task")]
        h = ShimHarness(config)
        try:
            resp = h.create(task_id="t-9")
            assert resp.status_code == 500
            body = nbmp.parse_document(resp.content, nbmp.TDD)
            assert any("already running" in f for f in body.acknowledge.failed)
        finally:
            h.shutdown()


class TestEventReporting:
    def test_lifecycle_event_sequence(self):
        channel = EventChannel()
        receiver = HttpServer(WebserverConfig(bind_address="127.0.0.1:0"))
        receiver.add_routes(event_api_routes(channel))
        received = []

        def consume():
            while True:
                record = channel.get(timeout=10)
                if record is None:
                    return
                received.append(record.type.rsplit(".", 1)[-1])

        consumer = threading.Thread(target=consume, daemon=True)
        consumer.start()
        with ServerHandle(receiver) as handle:
            config = TaskShimConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"))
            config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "pass"]})]
            h = ShimHarness(config)
            try:
                h.create(task_id="t-e", report_url=f"{handle.base_url()}/events")
                h.shim.terminal_event.wait(timeout=5)
                requests.delete(h.base + "/v2/tasks/t-e", timeout=5)
                assert h.wait_exit() == 0
                deadline = time.monotonic() + 5
                while time.monotonic() < deadline and "deleted" not in received:
                    time.sleep(0.02)
            finally:
                h.shutdown()
        channel.close()
        assert received[0] == "created"
        assert "started" in received
        assert "succeeded" in received
        assert received[-1] == "deleted"
        assert received.index("started") < received.index("succeeded")
