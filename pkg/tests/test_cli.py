from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import time

import pytest
import requests

from mediaengine.config import InvalidConfig, WrongKind, load_config, KIND_GATEWAY, KIND_WORKFLOW_MANAGER


def run_cli(args, timeout=30, **kw):
    return subprocess.run([sys.executable, "-m", "mediaengine.cli", *args],
                          capture_output=True, timeout=timeout, **kw)


class TestConfigLoading:
    def test_gateway_config_with_defaults(self, tmp_path):
        path = tmp_path / "gw.yaml"
        path.write_text("apiVersion: engine.nagare.media/v1alpha1\nkind: GatewayNBMPConfig\nnamespace: media\n")
        config = load_config(str(path), KIND_GATEWAY)
        assert config.namespace == "media"
        assert config.webserver.bind_address  # defaulted

    def test_kind_mismatch(self, tmp_path):
        path = tmp_path / "gw.yaml"
        path.write_text("kind: TaskShimConfig\n")
        with pytest.raises(WrongKind):
            load_config(str(path), KIND_GATEWAY)

    def test_missing_namespace_named_in_error(self, tmp_path):
        path = tmp_path / "gw.yaml"
        path.write_text("kind: GatewayNBMPConfig\n")
        with pytest.raises(InvalidConfig) as exc:
            load_config(str(path), KIND_GATEWAY)
        assert "namespace" in str(exc.value)

    def test_workflow_manager_config_durations(self, tmp_path):
        path = tmp_path / "wm.yaml"
        path.write_text(
            "kind: WorkflowManagerConfig\n"
            "controller:\n  workflowTerminationWaitingDuration: 250ms\n"
            "backend:\n  rootDir: /tmp/x\n")
        settings = load_config(str(path), KIND_WORKFLOW_MANAGER)
        assert settings.workflow_termination_waiting_duration == pytest.approx(0.25)

    def test_config_determinism(self, tmp_path):
        path = tmp_path / "gw.yaml"
        path.write_text("kind: GatewayNBMPConfig\nnamespace: media\n")
        a = load_config(str(path), KIND_GATEWAY)
        b = load_config(str(path), KIND_GATEWAY)
        assert a == b


class TestFunctionsCommand:
    def test_functions_subcommand_runs_noop(self, tmp_path):
        tdd = tmp_path / "tdd.json"
        tdd.write_text(json.dumps({"general": {"id": "t"}}))
        result = run_cli(["functions", "generic-noop", str(tdd)])
        assert result.returncode == 0

    def test_unknown_function_exit_2(self, tmp_path):
        tdd = tmp_path / "tdd.json"
        tdd.write_text("{}")
        result = run_cli(["functions", "nope", str(tdd)])
        assert result.returncode == 2


class TestGatewayCommand:
    def test_serves_until_sigterm(self, tmp_path):
        config = tmp_path / "gw.yaml"
        config.write_text(
            "kind: GatewayNBMPConfig\nnamespace: media\n"
            "webserver:\n  bindAddress: 127.0.0.1:0\n")
        proc = subprocess.Popen(
            [sys.executable, "-m", "mediaengine.cli", "gateway", "--config", str(config)],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
        try:
            port = None
            deadline = time.monotonic() + 40
            while time.monotonic() < deadline and port is None:
                line = proc.stdout.readline()
                if "serving on" in line:
                    port = int(line.rsplit(":", 1)[-1].strip().rstrip("/"))
            assert port, "gateway never reported its address"
            resp = requests.get(f"http://127.0.0.1:{port}/healthz", timeout=5)
            assert resp.status_code == 200
        finally:
            proc.send_signal(signal.SIGTERM)
            rc = proc.wait(timeout=10)
        assert rc == 0

    def test_bad_config_exit_1(self, tmp_path):
        config = tmp_path / "gw.yaml"
        config.write_text("kind: GatewayNBMPConfig\n")  # namespace missing
        result = run_cli(["gateway", "--config", str(config)])
        assert result.returncode == 1
        assert b"namespace" in result.stdout + result.stderr


class TestWorkflowManagerCommand:
    def test_starts_with_applied_resources_and_embedded_gateway(self, tmp_path):
        config = tmp_path / "wm.yaml"
        config.write_text(
            "kind: WorkflowManagerConfig\n"
            "webserver:\n  bindAddress: 127.0.0.1:0\n"
            f"eventLog:\n  root: {tmp_path / 'events'}\n"
            f"backend:\n  rootDir: {tmp_path / 'jobs'}\n"
            "gateway:\n  webserver:\n    bindAddress: 127.0.0.1:0\n  namespace: media\n")
        resources = tmp_path / "resources.yaml"
        resources.write_text(
            "apiVersion: engine.nagare.media/v1alpha1\n"
            "kind: MediaProcessingEntity\n"
            "metadata:\n  name: local\n  namespace: media\n"
            "spec:\n  local:\n    namespace: media\n")
        proc = subprocess.Popen(
            [sys.executable, "-m", "mediaengine.cli", "workflow-manager",
             "--config", str(config), "--apply", str(resources)],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
        try:
            port = None
            deadline = time.monotonic() + 40
            while time.monotonic() < deadline and port is None:
                line = proc.stdout.readline()
                if "gateway serving on" in line:
                    port = int(line.rsplit(":", 1)[-1].strip().rstrip("/"))
            assert port, "embedded gateway never reported its address"
            # gateway is up and serving the NBMP API
            resp = requests.get(f"http://127.0.0.1:{port}/v2/workflows/none", timeout=5)
            assert resp.status_code == 404
        finally:
            proc.send_signal(signal.SIGTERM)
            rc = proc.wait(timeout=30)
        assert rc == 0
