"""MPE execution backend.

The abstraction the task controller schedules onto, plus two implementations:
a local backend that runs each job as a pair of OS processes (the task-shim
wrapped function and the helper sidecar) and an in-memory fake for tests.

A job owns a working directory, a stable service endpoint (host:port used for
inter-task stream traffic) and a provisioned helper data file. The backend
injects per-job environment so the shim and helper agree on the loopback task
API address despite many jobs sharing one network namespace:

    NME_JOB_DIR        job working directory
    NME_TASK_API_BIND  address the task shim should bind its NBMP task API on
    NME_TASK_API       full task API URL for the helper client
    NME_DATA_FILE      path of the provisioned helper data file
    NME_PYTHON         interpreter running the engine (for shipped configs)
"""

from __future__ import annotations

import json
import os
import shlex
import shutil
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import logging

logger = logging.getLogger("mediaengine.backend")

PENDING = "Pending"
RUNNING = "Running"
SUCCEEDED = "Succeeded"
FAILED = "Failed"
TERMINAL = {SUCCEEDED, FAILED}


class BackendError(Exception):
    pass


class SpawnFailed(BackendError):
    pass


class SessionClosed(BackendError):
    pass


@dataclass
class JobSpec:
    name: str
    command: list[str]
    args: list[str] = field(default_factory=list)
    env: dict[str, str] = field(default_factory=dict)
    workdir: str = ""
    backoff_limit: int = 0
    data_file_path: str = ""
    labels: dict[str, str] = field(default_factory=dict)

    def identity(self) -> str:
        return json.dumps({
            "command": self.command, "args": self.args, "env": self.env,
            "workdir": self.workdir, "backoffLimit": self.backoff_limit,
            "dataFilePath": self.data_file_path, "labels": self.labels,
        }, sort_keys=True)

    def to_json(self) -> dict:
        return {
            "name": self.name, "command": self.command, "args": self.args,
            "env": self.env, "workdir": self.workdir, "backoffLimit": self.backoff_limit,
            "dataFilePath": self.data_file_path, "labels": self.labels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "JobSpec":
        return cls(name=obj["name"], command=list(obj.get("command") or []),
                   args=list(obj.get("args") or []), env=dict(obj.get("env") or {}),
                   workdir=obj.get("workdir", ""), backoff_limit=int(obj.get("backoffLimit") or 0),
                   data_file_path=obj.get("dataFilePath", ""), labels=dict(obj.get("labels") or {}))


@dataclass
class JobStatus:
    name: str
    phase: str = PENDING
    restart_count: int = 0
    exit_code: int | None = None
    message: str = ""
    labels: dict[str, str] = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL


@dataclass
class JobEvent:
    name: str
    phase: str
    labels: dict[str, str]
    restart_count: int = 0


class JobEventSubscription:
    def __init__(self):
        import queue

        self._queue: Any = queue.Queue()
        self.closed = False

    def get(self, timeout: float | None = None) -> JobEvent | None:
        import queue

        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        return item

    def _offer(self, event: JobEvent) -> None:
        if not self.closed:
            self._queue.put(event)

    def close(self) -> None:
        self.closed = True
        self._queue.put(None)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _pid_running(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class Session:
    """Backend session contract shared by all implementations."""

    def ensure_job(self, spec: JobSpec) -> JobStatus:
        raise NotImplementedError

    def job_status(self, name: str) -> JobStatus | None:
        raise NotImplementedError

    def delete_job(self, name: str) -> None:
        raise NotImplementedError

    def release_job(self, name: str) -> None:
        """Drop the engine's hold on a terminal job so cleanup can proceed."""
        raise NotImplementedError

    def ensure_service(self, task_name: str) -> str:
        raise NotImplementedError

    def provision_data(self, task_name: str, data: bytes) -> str:
        raise NotImplementedError

    def subscribe_job_events(self) -> JobEventSubscription:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def alive(self) -> bool:
        raise NotImplementedError


# Wrapper that records the wrapped command's exit code in a file. Jobs run in
# their own sessions and survive a control-plane crash; the exit file is how a
# later session learns the outcome of processes it never parented.
_WRAPPER_SCRIPT = (
    'log="$1"; exitf="$2"; shift 2; '
    '"$@" >> "$log" 2>&1; code=$?; '
    'echo "$code" > "$exitf.tmp" && mv "$exitf.tmp" "$exitf"'
)


class _LocalJob:
    def __init__(self, spec: JobSpec):
        self.spec = spec
        self.status = JobStatus(name=spec.name, labels=dict(spec.labels))
        self.processes: list[subprocess.Popen] = []
        self.pids: list[int] = []
        self.adopted = False
        self.generation = 0
        self.stopping = False
        self.held = True
        self.thread: threading.Thread | None = None
        self.lock = threading.Lock()


class LocalSession(Session):
    """Runs jobs as local process pairs under one namespace directory.

    All scheduling state (service and task-API ports, job specs, wrapper pids)
    persists under the namespace directory, and jobs run detached in their own
    process sessions: a crashed control plane leaves them running, and the
    next session adopts them instead of re-provisioning.
    """

    def __init__(self, namespace: str, root_dir: str,
                 helper_command: list[str] | None = None,
                 grace_period: float = 0.5,
                 env_extra: dict[str, str] | None = None):
        self.namespace = namespace
        self.root_dir = os.path.join(root_dir, namespace)
        os.makedirs(self.root_dir, exist_ok=True)
        self.helper_command = helper_command
        self.grace_period = grace_period
        self.env_extra = env_extra or {}
        self._jobs: dict[str, _LocalJob] = {}
        self._endpoints: dict[str, int] = {}
        self._shim_ports: dict[str, int] = {}
        self._subs: list[JobEventSubscription] = []
        self._lock = threading.RLock()
        self._closed = threading.Event()
        self._abandoned = False
        self._load_ports()
        self._adopt_jobs()

    # -- persisted scheduling state ----------------------------------------------

    def _ports_path(self) -> str:
        return os.path.join(self.root_dir, "ports.json")

    def _load_ports(self) -> None:
        try:
            with open(self._ports_path(), encoding="utf-8") as f:
                doc = json.load(f)
            self._endpoints = {k: int(v) for k, v in (doc.get("services") or {}).items()}
            self._shim_ports = {k: int(v) for k, v in (doc.get("shims") or {}).items()}
        except (OSError, ValueError):
            pass

    def _save_ports(self) -> None:
        tmp = self._ports_path() + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump({"services": self._endpoints, "shims": self._shim_ports}, f)
        os.replace(tmp, self._ports_path())

    def _job_state_path(self, name: str) -> str:
        return os.path.join(self._job_dir(name), "job.json")

    def _save_job_state(self, job: _LocalJob) -> None:
        doc = {
            "spec": job.spec.to_json(),
            "restartCount": job.status.restart_count,
            "pids": job.pids,
        }
        path = self._job_state_path(job.spec.name)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        os.replace(tmp, path)

    def _adopt_jobs(self) -> None:
        """Pick up jobs a previous session left running (or finished)."""
        try:
            entries = os.listdir(self.root_dir)
        except OSError:
            return
        for name in entries:
            state_path = self._job_state_path(name)
            if not os.path.isfile(state_path):
                continue
            try:
                with open(state_path, encoding="utf-8") as f:
                    doc = json.load(f)
                spec = JobSpec.from_json(doc["spec"])
            except (OSError, ValueError, KeyError):
                continue
            job = _LocalJob(spec)
            job.adopted = True
            job.pids = [int(p) for p in doc.get("pids") or []]
            job.status.restart_count = int(doc.get("restartCount") or 0)
            self._jobs[spec.name] = job
            job.thread = threading.Thread(target=self._monitor_job, args=(job, job.generation),
                                          name=f"job/{spec.name}", daemon=True)
            self._set_phase(job, RUNNING)
            job.thread.start()

    # -- services and data -----------------------------------------------------

    def ensure_service(self, task_name: str) -> str:
        with self._lock:
            if self._closed.is_set():
                raise SessionClosed(self.namespace)
            port = self._endpoints.get(task_name)
            if port is None:
                port = free_port()
                self._endpoints[task_name] = port
                self._save_ports()
            return f"127.0.0.1:{port}"

    def provision_data(self, task_name: str, data: bytes) -> str:
        job_dir = self._job_dir(task_name)
        os.makedirs(job_dir, exist_ok=True)
        path = os.path.join(job_dir, "data.json")
        if os.path.exists(path):
            with open(path, "rb") as f:
                if f.read() == data:
                    return path
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        return path

    def _job_dir(self, name: str) -> str:
        return os.path.join(self.root_dir, name)

    # -- jobs --------------------------------------------------------------------

    def ensure_job(self, spec: JobSpec) -> JobStatus:
        with self._lock:
            if self._closed.is_set():
                raise SessionClosed(self.namespace)
            exe = spec.command[0] if spec.command else ""
            if not exe or (os.path.isabs(exe) and not os.path.exists(exe)) or (
                    not os.path.isabs(exe) and shutil.which(exe) is None):
                raise SpawnFailed(f"command not found: {exe!r}")
            job = self._jobs.get(spec.name)
            if job is not None:
                if job.spec.identity() == spec.identity() and not job.status.terminal:
                    return self._snapshot(job)
                if job.spec.identity() != spec.identity():
                    self._stop_processes(job)
                    job.spec = spec
                    job.generation += 1
                    job.status = JobStatus(name=spec.name, labels=dict(spec.labels))
                    self._launch(job)
                return self._snapshot(job)
            job = _LocalJob(spec)
            self._jobs[spec.name] = job
            self._launch(job)
            return self._snapshot(job)

    def _launch(self, job: _LocalJob) -> None:
        job.stopping = False
        generation = job.generation
        job.thread = threading.Thread(target=self._run_job, args=(job, generation),
                                      name=f"job/{job.spec.name}", daemon=True)
        self._set_phase(job, PENDING)
        job.thread.start()

    def _job_env(self, job: _LocalJob) -> dict[str, str]:
        with self._lock:
            shim_port = self._shim_ports.get(job.spec.name)
            if shim_port is None:
                shim_port = free_port()
                self._shim_ports[job.spec.name] = shim_port
                self._save_ports()
        env = dict(os.environ)
        env.update(self.env_extra)
        env.update(job.spec.env)
        env.update({
            "NME_JOB_DIR": self._job_dir(job.spec.name),
            "NME_TASK_API_BIND": f"127.0.0.1:{shim_port}",
            "NME_TASK_API": f"http://127.0.0.1:{shim_port}/v2/tasks",
            "NME_DATA_FILE": job.spec.data_file_path or os.path.join(self._job_dir(job.spec.name), "data.json"),
            "NME_PYTHON": sys.executable,
        })
        return env

    def _proc_names(self) -> list[str]:
        return ["function", "helper"] if self.helper_command else ["function"]

    def _exit_file(self, job_dir: str, proc_name: str) -> str:
        return os.path.join(job_dir, f"exit.{proc_name}")

    def _run_job(self, job: _LocalJob, generation: int) -> None:
        """Spawn the wrapped process pair, then monitor; restarts on failure
        up to the backoff limit."""
        with self._lock:
            if job.generation != generation or job.stopping or self._closed.is_set():
                return
            job_dir = self._job_dir(job.spec.name)
            os.makedirs(job_dir, exist_ok=True)
            env = self._job_env(job)
            workdir = job.spec.workdir or job_dir
            os.makedirs(workdir, exist_ok=True)
            commands = {"function": list(job.spec.command) + list(job.spec.args)}
            if self.helper_command:
                commands["helper"] = list(self.helper_command)
            procs: list[subprocess.Popen] = []
            try:
                for proc_name in self._proc_names():
                    exit_file = self._exit_file(job_dir, proc_name)
                    for stale in (exit_file, exit_file + ".tmp"):
                        if os.path.exists(stale):
                            os.remove(stale)
                    argv = ["/bin/sh", "-c", _WRAPPER_SCRIPT, "nme-job",
                            os.path.join(job_dir, f"{proc_name}.log"), exit_file] + commands[proc_name]
                    procs.append(subprocess.Popen(argv, cwd=workdir, env=env,
                                                  stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
                                                  start_new_session=True))
            except OSError as e:
                job.status.message = f"spawn failed: {e}"
                self._set_phase(job, FAILED)
                return
            job.processes = procs
            job.pids = [p.pid for p in procs]
            self._save_job_state(job)
            # reap our children in the background so the monitor can rely on
            # exit files alone (identical to the adopted-orphan path)
            for proc in procs:
                threading.Thread(target=proc.wait, daemon=True).start()
        self._set_phase(job, RUNNING)
        self._monitor_job(job, generation)

    def _monitor_job(self, job: _LocalJob, generation: int) -> None:
        job_dir = self._job_dir(job.spec.name)
        while True:
            with self._lock:
                if job.generation != generation or job.stopping or self._closed.is_set():
                    return
                pids = list(job.pids)
            exit_codes: dict[str, int] = {}
            missing = []
            for proc_name in self._proc_names():
                code = self._read_exit_file(self._exit_file(job_dir, proc_name))
                if code is None:
                    missing.append(proc_name)
                else:
                    exit_codes[proc_name] = code
            if missing:
                if any(_pid_running(pid) for pid in pids):
                    time.sleep(0.05)
                    continue
                # every process is gone but some never wrote an exit file:
                # they were killed outright
                for proc_name in missing:
                    exit_codes[proc_name] = -9
            with self._lock:
                if job.generation != generation or job.stopping or self._closed.is_set():
                    return
                job.status.exit_code = exit_codes.get("function")
                if all(code == 0 for code in exit_codes.values()):
                    self._set_phase(job, SUCCEEDED)
                    return
                if job.status.restart_count >= job.spec.backoff_limit:
                    job.status.message = f"exit codes {exit_codes} after {job.status.restart_count} restarts"
                    self._set_phase(job, FAILED)
                    return
                job.status.restart_count += 1
                job.adopted = False
            time.sleep(0.02)
            self._run_job(job, generation)
            return

    @staticmethod
    def _read_exit_file(path: str) -> int | None:
        try:
            with open(path, encoding="utf-8") as f:
                return int(f.read().strip())
        except (OSError, ValueError):
            return None

    def _stop_processes(self, job: _LocalJob) -> None:
        with self._lock:
            job.stopping = True
            job.generation += 1
            procs = list(job.processes)
            pids = list(job.pids)
            job.processes = []
            job.pids = []
        for pid in pids:
            try:
                os.killpg(pid, signal.SIGTERM)  # wrappers lead their own sessions
            except (ProcessLookupError, PermissionError):
                pass
        deadline = time.monotonic() + self.grace_period
        while time.monotonic() < deadline and any(_pid_running(pid) for pid in pids):
            time.sleep(0.02)
        for pid in pids:
            if _pid_running(pid):
                try:
                    os.killpg(pid, signal.SIGKILL)
                except (ProcessLookupError, PermissionError):
                    pass
        for proc in procs:
            try:
                proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                pass

    def job_status(self, name: str) -> JobStatus | None:
        with self._lock:
            job = self._jobs.get(name)
            return self._snapshot(job) if job else None

    def list_jobs(self) -> list[JobStatus]:
        with self._lock:
            return [self._snapshot(j) for j in self._jobs.values()]

    def delete_job(self, name: str) -> None:
        with self._lock:
            job = self._jobs.pop(name, None)
            self._endpoints.pop(name, None)
            self._shim_ports.pop(name, None)
            self._save_ports()
        if job is not None:
            self._stop_processes(job)
        for artifact in ("data.json", "job.json"):
            path = os.path.join(self._job_dir(name), artifact)
            if os.path.exists(path):
                try:
                    os.remove(path)
                except OSError:
                    pass

    def release_job(self, name: str) -> None:
        with self._lock:
            job = self._jobs.get(name)
            if job is not None:
                job.held = False

    def stop_job(self, name: str) -> None:
        """Terminate a job's processes but keep the record for inspection."""
        with self._lock:
            job = self._jobs.get(name)
        if job is None:
            return
        self._stop_processes(job)
        with self._lock:
            if not job.status.terminal:
                job.status.message = "stopped by controller"
                self._set_phase(job, FAILED)

    # -- events and lifecycle ---------------------------------------------------

    def subscribe_job_events(self) -> JobEventSubscription:
        sub = JobEventSubscription()
        with self._lock:
            self._subs.append(sub)
        return sub

    def _set_phase(self, job: _LocalJob, phase: str) -> None:
        if job.status.phase == phase and phase != PENDING:
            return
        job.status.phase = phase
        event = JobEvent(name=job.spec.name, phase=phase, labels=dict(job.spec.labels),
                         restart_count=job.status.restart_count)
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            sub._offer(event)

    def _snapshot(self, job: _LocalJob) -> JobStatus:
        return JobStatus(name=job.status.name, phase=job.status.phase,
                         restart_count=job.status.restart_count, exit_code=job.status.exit_code,
                         message=job.status.message, labels=dict(job.status.labels))

    def close(self) -> None:
        with self._lock:
            if self._closed.is_set():
                return
            self._closed.set()
            jobs = list(self._jobs.values())
            subs = list(self._subs)
        for job in jobs:
            self._stop_processes(job)
        for sub in subs:
            sub.close()

    kill = close  # fault injection alias: an abrupt session death

    def abandon(self) -> None:
        """Simulate a control-plane crash: stop watching, leave every job's
        processes running; the next session adopts them from disk."""
        with self._lock:
            if self._closed.is_set():
                return
            self._abandoned = True
            self._closed.set()
            subs = list(self._subs)
        for sub in subs:
            sub.close()

    @property
    def alive(self) -> bool:
        return not self._closed.is_set()

    @property
    def closed_event(self) -> threading.Event:
        return self._closed


class FakeSession(Session):
    """In-memory backend: jobs reach a scripted phase after a scripted delay.

    outcomes maps job name to (phase, delay_seconds); unscripted jobs succeed
    after default_delay.
    """

    def __init__(self, namespace: str = "default", default_delay: float = 0.05,
                 outcomes: dict[str, tuple[str, float]] | None = None):
        self.namespace = namespace
        self.default_delay = default_delay
        self.outcomes = outcomes or {}
        self._jobs: dict[str, JobStatus] = {}
        self._specs: dict[str, str] = {}
        self._endpoints: dict[str, str] = {}
        self._data: dict[str, bytes] = {}
        self._subs: list[JobEventSubscription] = []
        self._timers: list[threading.Timer] = []
        self._lock = threading.RLock()
        self._closed = threading.Event()
        self.ensure_calls = 0

    def ensure_job(self, spec: JobSpec) -> JobStatus:
        with self._lock:
            if self._closed.is_set():
                raise SessionClosed(self.namespace)
            self.ensure_calls += 1
            existing = self._jobs.get(spec.name)
            if existing is not None and self._specs.get(spec.name) == spec.identity():
                return existing
            status = JobStatus(name=spec.name, phase=RUNNING, labels=dict(spec.labels))
            self._jobs[spec.name] = status
            self._specs[spec.name] = spec.identity()
            self._emit(JobEvent(spec.name, RUNNING, dict(spec.labels)))
            phase, delay = self.outcomes.get(spec.name, (SUCCEEDED, self.default_delay))
            timer = threading.Timer(delay, self._finish, args=(spec.name, phase))
            timer.daemon = True
            self._timers.append(timer)
            timer.start()
            return status

    def _finish(self, name: str, phase: str) -> None:
        with self._lock:
            status = self._jobs.get(name)
            if status is None or status.terminal or self._closed.is_set():
                return
            status.phase = phase
            self._emit(JobEvent(name, phase, dict(status.labels)))

    def set_outcome(self, name: str, phase: str) -> None:
        self._finish(name, phase)

    def job_status(self, name: str) -> JobStatus | None:
        with self._lock:
            return self._jobs.get(name)

    def delete_job(self, name: str) -> None:
        with self._lock:
            self._jobs.pop(name, None)
            self._specs.pop(name, None)
            self._endpoints.pop(name, None)

    def release_job(self, name: str) -> None:
        pass

    def stop_job(self, name: str) -> None:
        with self._lock:
            status = self._jobs.get(name)
            if status is not None and not status.terminal:
                status.phase = FAILED
                status.message = "stopped by controller"
                self._emit(JobEvent(name, FAILED, dict(status.labels)))

    def ensure_service(self, task_name: str) -> str:
        with self._lock:
            endpoint = self._endpoints.get(task_name)
            if endpoint is None:
                endpoint = f"127.0.0.1:{9000 + len(self._endpoints)}"
                self._endpoints[task_name] = endpoint
            return endpoint

    def provision_data(self, task_name: str, data: bytes) -> str:
        with self._lock:
            self._data[task_name] = data
            return f"/fake/{self.namespace}/{task_name}/data.json"

    def subscribe_job_events(self) -> JobEventSubscription:
        sub = JobEventSubscription()
        with self._lock:
            self._subs.append(sub)
        return sub

    def _emit(self, event: JobEvent) -> None:
        for sub in list(self._subs):
            sub._offer(event)

    def close(self) -> None:
        with self._lock:
            if self._closed.is_set():
                return
            self._closed.set()
            subs = list(self._subs)
            timers = list(self._timers)
        for timer in timers:
            timer.cancel()
        for sub in subs:
            sub.close()

    kill = close

    @property
    def alive(self) -> bool:
        return not self._closed.is_set()

    @property
    def closed_event(self) -> threading.Event:
        return self._closed


@dataclass
class BackendConfig:
    root_dir: str
    helper_command: list[str] | None = None
    grace_period: float = 0.5
    env_extra: dict[str, str] = field(default_factory=dict)


def open_local_session(namespace: str, config: BackendConfig) -> LocalSession:
    return LocalSession(namespace, config.root_dir, helper_command=config.helper_command,
                        grace_period=config.grace_period, env_extra=config.env_extra)


def parse_command(value: str | list[str]) -> list[str]:
    if isinstance(value, list):
        return [str(v) for v in value]
    return shlex.split(value)
