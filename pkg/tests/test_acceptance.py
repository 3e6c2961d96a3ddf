"""Acceptance suite: one test per criterion, at the stated tolerances.

Criteria 1, 2 and 9 drive the complete system with real OS processes (task
shim, helper sidecar and media functions as subprocesses streaming over
loopback HTTP). The remaining criteria exercise the subsystems directly.
Each test prints a PASS line; run with -s to see them.
"""

from __future__ import annotations

import hashlib
import json
import os
import pathlib
import random
import sys
import threading
import time

import pytest
import requests

from generators import make_random_wdd
from mediaengine import convert, model, nbmp
from mediaengine.backend import BackendConfig
from mediaengine.controllers import WorkflowManager, WorkflowManagerSettings
from mediaengine.events import EventLog, EventRecord
from mediaengine.gateway import Gateway, GatewayConfig
from mediaengine.httpkit import ServerHandle, WebserverConfig
from mediaengine.store import NotFound, ResourceStore

REPO = pathlib.Path(__file__).parent.parent
SHIM_CONFIG = str(REPO / "configs" / "task-shim.yaml")
NS = "media"

LIFECYCLE_EVENTS = {"created", "updated", "deleted", "started", "stopped", "succeeded", "failed"}


def ok(criterion: int, message: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS - {message}")


# -- real-process system harness ---------------------------------------------------


class System:
    def __init__(self, base: pathlib.Path, waiting: float = 0.5, snapshot: bool = True):
        base.mkdir(parents=True, exist_ok=True)
        self.base = base
        self.store = ResourceStore(snapshot_path=str(base / "store.json") if snapshot else None)
        self.settings = WorkflowManagerSettings(
            workflow_termination_waiting_duration=waiting,
            event_log_root=str(base / "events"),
            backend=BackendConfig(
                root_dir=str(base / "jobs"),
                helper_command=[sys.executable, "-m", "mediaengine.cli", "workflow-manager-helper"],
                env_extra={"NME_OBSERVE_PERIOD": "100ms", "NME_LOG_LEVEL": "WARNING"},
            ),
        )
        self.manager = WorkflowManager(self.store, self.settings)
        self.stop = self.manager.run_background()

    def shutdown(self):
        self.manager.stop_and_join(self.stop)

    def crash(self):
        """Abrupt control-plane death: jobs and their processes survive."""
        self.manager.crash_and_join(self.stop)

    def install_platform(self, fail_function: bool = False):
        mpe = model.new_resource(model.KIND_MPE, "local", NS, spec={"local": {"namespace": NS}})
        mpe["metadata"]["annotations"][model.ANNOTATION_DEFAULT_MPE] = "true"
        self.store.create(mpe)
        for name in ("media-generate-testpattern", "data-copy", "data-discard"):
            self.store.create(self.make_function(name))
        if fail_function:
            # a function whose wrapped command exits 1
            fn = self.make_function("data-discard")
            fn["metadata"]["name"] = "always-fails"
            fn["spec"]["template"]["env"]["NME_FUNCTION"] = "generic-sleep"  # no duration -> exit 1
            self.store.create(fn)

    @staticmethod
    def make_function(name: str) -> dict:
        return model.new_resource(model.KIND_FUNCTION, name, NS, spec={
            "version": "0.1.0",
            "template": {
                "command": [sys.executable, "-m", "mediaengine.cli", "task-shim", "--config", SHIM_CONFIG],
                "env": {"NME_FUNCTION": name},
            },
        })

    def submit(self, wdd: dict):
        d = nbmp.parse_document(json.dumps(wdd).encode(), nbmp.WDD)
        nbmp.default_description(d)
        assert nbmp.validate_lax(d) == []
        workflow, tasks = convert.wdd_to_resources(d, NS)
        self.store.create(workflow)
        for task in tasks:
            self.store.create(task)

    def wait_phase(self, name: str, phases: set[str], timeout: float) -> dict:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                wf = self.store.get(model.KIND_WORKFLOW, NS, name)
            except NotFound:
                time.sleep(0.05)
                continue
            if (wf.get("status") or {}).get("phase") in phases:
                return wf
            time.sleep(0.05)
        wf = self.store.get(model.KIND_WORKFLOW, NS, name)
        raise AssertionError(f"workflow {name} stuck in {(wf.get('status') or {}).get('phase')}; "
                             f"status={wf.get('status')}")

    def event_types(self, workflow: str, task: str) -> list[tuple[str, dict]]:
        log = EventLog(self.settings.event_log_root)
        records = log.replay(f"events.{workflow}.{task}")
        return [(r.type.rsplit(".", 1)[-1], r.data or {}) for r in records]


def pipeline_wdd(wf_id: str) -> dict:
    return {
        "general": {"id": wf_id, "name": "pattern fan-out"},
        "processing": {
            "connection-map": [
                {"from": {"id": "generate", "port-name": "out"}, "to": {"id": "copy", "port-name": "in"}},
                {"from": {"id": "copy", "port-name": "out.0"}, "to": {"id": "discard-a", "port-name": "in"}},
                {"from": {"id": "copy", "port-name": "out.1"}, "to": {"id": "discard-b", "port-name": "in"}},
            ],
            "function-restrictions": [
                {"instance": "generate", "general": {"id": "media-generate-testpattern"},
                 "configuration": {"parameters": [{"name": "bytes", "values": ["4096"]}]}},
                {"instance": "copy", "general": {"id": "data-copy"}},
                {"instance": "discard-a", "general": {"id": "data-discard"}},
                {"instance": "discard-b", "general": {"id": "data-discard"}},
            ],
        },
    }


class TestCriterion1EndToEnd:
    def test_pipeline_succeeds_with_byte_conservation(self, tmp_path):
        system = System(tmp_path, waiting=0.5)
        try:
            system.install_platform()
            gateway = Gateway(system.store, GatewayConfig(
                webserver=WebserverConfig(bind_address="127.0.0.1:0"), namespace=NS))
            with ServerHandle(gateway.server) as handle:
                started = time.monotonic()
                resp = requests.post(f"{handle.base_url()}/v2/workflows",
                                     data=json.dumps(pipeline_wdd("demo")).encode(), timeout=10)
                assert resp.status_code == 201
                system.wait_phase("demo", {model.WF_SUCCEEDED}, timeout=30)
                elapsed = time.monotonic() - started
            assert elapsed <= 30

            digests = {}
            for task in ("demo-generate", "demo-copy", "demo-discard-a", "demo-discard-b"):
                events = system.event_types("demo", task)
                names = [n for n, _ in events]
                lifecycle = [n for n in names if n in LIFECYCLE_EVENTS]
                assert lifecycle[0] == "created", f"{task}: {names}"
                assert lifecycle[-1] == "deleted", f"{task}: {names}"
                assert "started" in lifecycle and "succeeded" in lifecycle
                assert lifecycle.index("started") < lifecycle.index("succeeded")
                for name, data in events:
                    if name == "io-summary":
                        digests[task] = data["digests"]
            generated = digests["demo-generate"]["out"]
            assert digests["demo-discard-a"]["in"] == generated
            assert digests["demo-discard-b"]["in"] == generated
            assert digests["demo-copy"]["out"] == generated
            ok(1, f"4-task pipeline Succeeded in {elapsed:.1f}s, digests equal, event order valid")
        finally:
            system.shutdown()


class TestCriterion2FailurePolicy:
    def run_with_policy(self, tmp_path, ignore: bool) -> tuple[dict, "System"]:
        system = System(tmp_path, waiting=0.4)
        system.install_platform(fail_function=True)
        doc = pipeline_wdd("wf-pol")
        doc["processing"]["function-restrictions"].append(
            {"instance": "doomed", "general": {"id": "always-fails"}})
        system.submit(doc)
        if ignore:
            from mediaengine.store import Conflict

            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                try:
                    task = system.store.get(model.KIND_TASK, NS, "wf-pol-doomed")
                    task["spec"]["jobFailurePolicy"] = model.POLICY_IGNORE
                    system.store.patch(task, expected_version=task["metadata"]["resourceVersion"])
                    break
                except (NotFound, Conflict):
                    time.sleep(0.02)
        return doc, system

    def test_default_policy_fails_workflow_and_tears_down_siblings(self, tmp_path):
        _, system = self.run_with_policy(tmp_path / "fail", ignore=False)
        try:
            failed_at = time.monotonic()
            wf = system.wait_phase("wf-pol", {model.WF_FAILED}, timeout=30)
            # terminal phase within 10s of the task failure implies prompt teardown
            deadline = time.monotonic() + 10
            session = system.manager.registry.items()[0][1]
            while time.monotonic() < deadline:
                tasks = system.store.list(model.KIND_TASK, NS)
                all_terminal = all((t.get("status") or {}).get("phase") in model.TASK_TERMINAL for t in tasks)
                jobs_down = all(
                    (session.job_status(t["metadata"]["name"]) is None
                     or session.job_status(t["metadata"]["name"]).terminal)
                    for t in tasks)
                if all_terminal and jobs_down:
                    break
                time.sleep(0.1)
            assert all_terminal, [t.get("status", {}).get("phase") for t in tasks]
            assert jobs_down
            ok(2, f"default policy: workflow Failed, siblings torn down in {time.monotonic() - failed_at:.1f}s")
        finally:
            system.shutdown()

    def test_ignore_policy_workflow_succeeds(self, tmp_path):
        _, system = self.run_with_policy(tmp_path / "ignore", ignore=True)
        try:
            wf = system.wait_phase("wf-pol", {model.WF_SUCCEEDED, model.WF_FAILED}, timeout=40)
            assert wf["status"]["phase"] == model.WF_SUCCEEDED
            assert wf["status"]["failed"] == 1
            ok(2, "Ignore policy: workflow Succeeded despite one failed task")
        finally:
            system.shutdown()


class TestCriterion3AwaitingCompletion:
    def make_system(self, tmp_path) -> "System":
        system = System.__new__(System)
        system.base = tmp_path
        system.store = ResourceStore()
        system.settings = WorkflowManagerSettings(
            workflow_termination_waiting_duration=0.2,
            use_fake_backend=True,
            event_log_root="",
        )
        system.manager = WorkflowManager(system.store, system.settings)
        system.stop = system.manager.run_background()
        return system

    def wait_for(self, system, name, phases, timeout=10.0):
        return System.wait_phase(system, name, phases, timeout)

    def install(self, system):
        mpe = model.new_resource(model.KIND_MPE, "local", NS, spec={"local": {"namespace": NS}})
        mpe["metadata"]["annotations"][model.ANNOTATION_DEFAULT_MPE] = "true"
        system.store.create(mpe)
        system.store.create(model.new_resource(model.KIND_FUNCTION, "fake-fn", NS,
                                               spec={"template": {"command": ["x"]}}))

    def submit_two_tasks(self, system, wf_id):
        System.submit(system, {
            "general": {"id": wf_id},
            "processing": {"function-restrictions": [
                {"instance": "a", "general": {"id": "fake-fn"}},
                {"instance": "b", "general": {"id": "fake-fn"}},
            ], "connection-map": []},
        })

    def test_succeeded_no_earlier_than_waiting_duration(self, tmp_path):
        system = self.make_system(tmp_path)
        try:
            self.install(system)
            self.submit_two_tasks(system, "wf-t")
            self.wait_for(system, "wf-t", {model.WF_AWAITING_COMPLETION})
            entered = time.monotonic()
            self.wait_for(system, "wf-t", {model.WF_SUCCEEDED})
            waited = time.monotonic() - entered
            wf = system.store.get(model.KIND_WORKFLOW, NS, "wf-t")
            end = model.parse_iso(wf["status"]["endTime"])
            succeeded_after = time.time() - end
            assert succeeded_after >= 0.15, f"succeeded only {succeeded_after:.3f}s after last task end"
            assert waited <= 2.0
            ok(3, f"Succeeded {succeeded_after * 1000:.0f}ms after last task end (window 200ms +-50ms)")
        finally:
            system.manager.stop_and_join(system.stop)

    def test_task_injected_mid_wait_returns_to_running(self, tmp_path):
        system = self.make_system(tmp_path)
        try:
            self.install(system)
            session_box = {}
            self.submit_two_tasks(system, "wf-u")
            self.wait_for(system, "wf-u", {model.WF_AWAITING_COMPLETION})
            # inject a new task at ~100ms into the 200ms window
            time.sleep(0.1)
            for key, session in system.manager.registry.items():
                session.default_delay = 0.5
                session_box["s"] = session
            late = model.new_resource(model.KIND_TASK, "wf-u-late", NS, spec={
                "workflowRef": {"name": "wf-u"},
                "functionRef": {"name": "fake-fn"},
            }, labels={model.LABEL_WORKFLOW: "wf-u"})
            system.store.create(late)
            wf = self.wait_for(system, "wf-u", {model.WF_RUNNING})
            assert wf["status"]["phase"] == model.WF_RUNNING
            wf = self.wait_for(system, "wf-u", {model.WF_SUCCEEDED})
            assert wf["status"]["total"] == 3
            ok(3, "task injected mid-wait returned the workflow to Running")
        finally:
            system.manager.stop_and_join(system.stop)


class TestCriterion4ConversionRoundTrip:
    def test_500_wdds_round_trip_under_10s(self):
        from test_convert import canonical, parse_wdd

        rng = random.Random(1234)
        started = time.monotonic()
        for i in range(500):
            doc = make_random_wdd(rng)
            d = parse_wdd(doc)
            workflow, tasks = convert.wdd_to_resources(d, NS)
            back = convert.resources_to_wdd(workflow, tasks)
            assert canonical(back) == canonical(d), f"WDD {i} diverged"
        elapsed = time.monotonic() - started
        assert elapsed < 10
        ok(4, f"500 generated WDDs round-tripped in {elapsed:.2f}s")


class TestCriterion5PortMatrix:
    PAYLOAD = os.urandom(1024 * 1024)

    def digest(self, data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()

    def run_pair(self, mode: str, buffered_capacity: int | None = None) -> str:
        from mediaengine.streamio import Connection, IOManager
        from mediaengine.streamio.buffered import BufferedPort
        from mediaengine.streamio.httpport import HttpPort

        import socket

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port_num = s.getsockname()[1]

        received: list[bytes] = []
        done = threading.Event()

        class Sink:
            def write(self, data):
                received.append(bytes(data))

            def close(self):
                done.set()

        def wrap(port):
            if buffered_capacity is not None:
                return BufferedPort(port, capacity=buffered_capacity)
            return port

        url = f"http://127.0.0.1:{port_num}/s"
        manager = IOManager()
        if mode == "push":
            input_port = wrap(HttpPort("in", "input", "push", url))
            output_port = wrap(HttpPort("out", "output", "push", url))
        else:
            input_port = wrap(HttpPort("in", "input", "pull", url))
            output_port = wrap(HttpPort("out", "output", "pull", url))
        input_port.connect(Connection(Sink()))
        manager.add_port(input_port, critical=False)
        manager.add_port(output_port, critical=False)

        def produce(stop):
            view = memoryview(self.PAYLOAD)
            for i in range(0, len(view), 128 * 1024):
                output_port.write(bytes(view[i:i + 128 * 1024]))
            output_port.close()

        manager.add_member("producer", produce, critical=False)
        from mediaengine.runtime import StopToken

        stop = StopToken()
        t = threading.Thread(target=manager.run, args=(stop,), daemon=True)
        t.start()
        t.join(timeout=60)
        assert not t.is_alive(), f"{mode} pairing hung"
        assert not manager.errors, manager.errors
        assert done.is_set()
        return self.digest(b"".join(received))

    def test_http_mode_pairings(self):
        want = self.digest(self.PAYLOAD)
        for mode in ("push", "pull"):
            assert self.run_pair(mode) == want, f"{mode} chain corrupted the payload"
        ok(5, "output-push->input-push and input-pull<-output-pull both byte-identical at 1 MiB")

    @pytest.mark.parametrize("capacity", [8, 4096, 10 * 1024 * 1024])
    def test_buffered_wrapping(self, capacity):
        want = self.digest(self.PAYLOAD)
        assert self.run_pair("push", buffered_capacity=capacity) == want
        ok(5, f"buffered wrapping at capacity {capacity} byte-identical at 1 MiB")

    def test_blocking_contract_at_boundary(self):
        from mediaengine.streamio import RingBuffer

        ring = RingBuffer(8)
        accepted = threading.Event()
        overflow_accepted = threading.Event()

        def writer():
            ring.write(b"x" * 8)
            accepted.set()
            ring.write(b"y")  # capacity+1th byte must block
            overflow_accepted.set()

        t = threading.Thread(target=writer, daemon=True)
        t.start()
        assert accepted.wait(timeout=1), "write of exactly capacity blocked"
        assert not overflow_accepted.wait(timeout=0.2), "write beyond capacity did not block"
        assert ring.read(1) == b"x"
        assert overflow_accepted.wait(timeout=1), "write did not resume after one byte was read"
        ok(5, "blocking contract exact at the capacity boundary")


class TestCriterion6HelperProbes:
    def test_probe_window_and_reset(self):
        from test_helper import ScriptedShim, fast_config, helper_data, run_helper_against

        shim = ScriptedShim(["fail"])
        code, helper = run_helper_against(shim, fast_config(period=0.05, probes=3), helper_data())
        assert code != 0
        assert shim.probes == 3
        assert 0.15 <= helper.observe_duration <= 0.30
        shim2 = ScriptedShim(["fail", "ok", "fail", "ok", "destroyed"])
        code2, _ = run_helper_against(shim2, fast_config(period=0.02, probes=2), helper_data())
        assert code2 == 0
        ok(6, f"failure declared after exactly 3 probes in {helper.observe_duration * 1000:.0f}ms; "
              "mid-sequence success resets the counter")


class TestCriterion7EventReplay:
    def test_instance2_receives_prior_events_in_order_before_live(self, tmp_path):
        from mediaengine.helper import replay_events
        from mediaengine.httpkit import HttpServer, Request, Response
        from mediaengine.events import decode_http_request

        log = EventLog(str(tmp_path))
        subject = "events.wf.task-1"
        written = [EventRecord.new(source="/instance-1", type=f"com.example.step{i}") for i in range(5)]
        for record in written:
            log.append(subject, record)
        # instance 1 is gone; instance 2's port records arrivals
        arrivals: list[str] = []
        server = HttpServer(WebserverConfig(bind_address="127.0.0.1:0"))

        def port_handler(request: Request) -> Response:
            for record in decode_http_request(request.headers, request.body()):
                arrivals.append(record.id)
            return Response.text(200, "ok")

        server.add_route("POST", "/nme-events", port_handler)
        with ServerHandle(server) as handle:
            count = replay_events(log, subject, f"{handle.base_url()}/nme-events")
            # a live event recorded after replay must not be delivered retroactively
            live = EventRecord.new(source="/instance-2", type="com.example.live")
            log.append(subject, live)
        assert count == 5
        assert arrivals == [r.id for r in written]
        assert live.id not in arrivals
        ok(7, "5 prior events replayed in append order; live event not replayed retroactively")


class TestCriterion8StoreSemantics:
    def test_randomized_interleavings(self):
        from test_store import run_randomized_interleavings

        started = time.monotonic()
        run_randomized_interleavings(cases=1000, seed=97)
        elapsed = time.monotonic() - started
        assert elapsed < 30
        ok(8, f"1000 randomized interleavings held all store invariants in {elapsed:.1f}s")


class TestCriterion9CrashRestart:
    def test_kill_and_restart_at_random_points(self, tmp_path):
        rng = random.Random(2026)
        runs = 10
        for attempt in range(runs):
            base = tmp_path / f"run{attempt}"
            system = System(base, waiting=0.3)
            try:
                system.install_platform()
                system.submit(pipeline_wdd("wf-crash"))
                kill_after = rng.uniform(0.0, 8.0)
                time.sleep(kill_after)
            finally:
                system.crash()  # control plane dies; job processes survive

            recovered = System(base, waiting=0.3)
            try:
                wf = recovered.wait_phase("wf-crash", {model.WF_SUCCEEDED}, timeout=45)
                assert wf["status"]["total"] == 4
                assert wf["status"]["succeeded"] == 4
                assert wf["status"]["failed"] == 0
                census = sorted(t["metadata"]["name"] for t in recovered.store.list(model.KIND_TASK, NS))
                assert census == ["wf-crash-copy", "wf-crash-discard-a", "wf-crash-discard-b", "wf-crash-generate"]
            finally:
                recovered.shutdown()
        ok(9, f"{runs} kill/restart points all converged to Succeeded with an identical task census")


class TestCriterion10TaskShimContract:
    def test_contract(self):
        from mediaengine.httpkit import WebserverConfig as WsConfig
        from mediaengine.shim import ActionSpec, TaskShimConfig
        from test_shim import ShimHarness, make_tdd

        config = TaskShimConfig(webserver=WsConfig(bind_address="127.0.0.1:0"))
        config.actions = [ActionSpec("run", "exec", {"command": [sys.executable, "-c", "import time; time.sleep(5)"]})]
        config.create_timeout = 30
        harness = ShimHarness(config)
        try:
            assert harness.create(task_id="t-1").status_code == 201
            assert harness.create(task_id="t-1").status_code == 409
        finally:
            harness.shutdown()

        config2 = TaskShimConfig(webserver=WsConfig(bind_address="127.0.0.1:0"))
        config2.create_timeout = 30
        harness2 = ShimHarness(config2)
        try:
            resp = requests.patch(harness2.base + "/v2/tasks/t-x", data=make_tdd(task_id="t-x"), timeout=5)
            assert resp.status_code == 404
        finally:
            harness2.shutdown()

        config3 = TaskShimConfig(webserver=WsConfig(bind_address="127.0.0.1:0"))
        config3.create_timeout = 0.3
        harness3 = ShimHarness(config3)
        started = time.monotonic()
        code = harness3.wait_exit(timeout=10)
        assert code != 0
        assert time.monotonic() - started < 5
        ok(10, "double create 409; update before create rejected; absent create within 300ms exits nonzero")
