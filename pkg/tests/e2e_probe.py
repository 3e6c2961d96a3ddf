"""Hand-run end-to-end probe (not a pytest module)."""

from __future__ import annotations

import json
import pathlib
import sys
import tempfile
import time

import requests

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from mediaengine import model  # noqa: E402
from mediaengine.backend import BackendConfig  # noqa: E402
from mediaengine.controllers import WorkflowManager, WorkflowManagerSettings  # noqa: E402
from mediaengine.gateway import Gateway, GatewayConfig  # noqa: E402
from mediaengine.httpkit import ServerHandle, WebserverConfig  # noqa: E402
from mediaengine.store import ResourceStore  # noqa: E402

REPO = pathlib.Path(__file__).parent.parent
NS = "media"


def make_function(name: str, shim_config: str, default_config=None) -> dict:
    return model.new_resource(model.KIND_FUNCTION, name, NS, spec={
        "version": "0.1.0",
        "defaultConfig": default_config or {},
        "template": {
            "command": [sys.executable, "-m", "mediaengine.cli", "task-shim", "--config", shim_config],
            "env": {"NME_FUNCTION": name},
        },
    })


def main() -> int:
    base = pathlib.Path(tempfile.mkdtemp(prefix="nme-e2e-"))
    print("workdir:", base)
    store = ResourceStore(snapshot_path=str(base / "store.json"))
    settings = WorkflowManagerSettings(
        workflow_termination_waiting_duration=0.5,
        event_log_root=str(base / "events"),
        backend=BackendConfig(
            root_dir=str(base / "jobs"),
            helper_command=[sys.executable, "-m", "mediaengine.cli", "workflow-manager-helper"],
            env_extra={"NME_OBSERVE_PERIOD": "150ms", "NME_LOG_LEVEL": "INFO"},
        ),
    )
    manager = WorkflowManager(store, settings)
    stop = manager.run_background()

    shim_config = str(REPO / "configs" / "task-shim.yaml")
    mpe = model.new_resource(model.KIND_MPE, "local", NS, spec={"local": {"namespace": NS}})
    mpe["metadata"]["annotations"][model.ANNOTATION_DEFAULT_MPE] = "true"
    store.create(mpe)
    for fn in ("media-generate-testpattern", "data-copy", "data-discard"):
        store.create(make_function(fn, shim_config))

    gateway = Gateway(store, GatewayConfig(webserver=WebserverConfig(bind_address="127.0.0.1:0"), namespace=NS))
    with ServerHandle(gateway.server) as handle:
        wdd = json.loads((REPO / "configs" / "demo-workflow.json").read_text())
        resp = requests.post(f"{handle.base_url()}/v2/workflows", data=json.dumps(wdd).encode(), timeout=10)
        print("create:", resp.status_code, resp.headers.get("Location"))
        assert resp.status_code == 201, resp.text

        deadline = time.monotonic() + 45
        phase = ""
        while time.monotonic() < deadline:
            wf = store.get(model.KIND_WORKFLOW, NS, "demo")
            new_phase = (wf.get("status") or {}).get("phase", "")
            if new_phase != phase:
                phase = new_phase
                print(f"[{time.strftime('%X')}] workflow phase: {phase} counters:",
                      {k: wf['status'].get(k) for k in ('total', 'active', 'succeeded', 'failed')})
            if phase in ("Succeeded", "Failed"):
                break
            time.sleep(0.1)

        print("final phase:", phase)
        for task in store.list(model.KIND_TASK, NS):
            status = task.get("status") or {}
            print(" task", task["metadata"]["name"], status.get("phase"),
                  [c["type"] + "=" + c["status"] for c in status.get("conditions", [])])
        # dump job logs on failure
        if phase != "Succeeded":
            jobs_dir = base / "jobs" / NS
            for job_dir in sorted(jobs_dir.glob("*")):
                for log_name in ("function.log", "helper.log"):
                    log_path = job_dir / log_name
                    if log_path.exists():
                        print(f"--- {log_path} ---")
                        print(log_path.read_text()[-3000:])
        # event log inspection
        events_dir = base / "events"
        if events_dir.exists():
            for log_file in sorted(events_dir.glob("*.log")):
                lines = log_file.read_text().strip().splitlines()
                types = [json.loads(line.split(" ", 2)[2])["type"].rsplit(".", 1)[-1] for line in lines]
                print("events", log_file.name, types)

    manager.stop_and_join(stop)
    return 0 if phase == "Succeeded" else 1


if __name__ == "__main__":
    raise SystemExit(main())
