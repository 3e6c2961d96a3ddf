"""Task controller.

Resolves each task to an MPE and a function (direct reference, then label
selector, then the task template's reference/selector, then the default-MPE
annotation), provisions the job, service endpoint and helper data file through
the MPE's backend session, and tracks the job outcome back into the task
phase: Initializing, JobPending, Running, Succeeded/Failed.

Jobs live in execution backends without cross-store owner references, so the
delete path removes the backend job manually before releasing the finalizer.
"""

from __future__ import annotations

import copy
import json
import logging

from mediaengine import backend as backendmod
from mediaengine import convert, model
from mediaengine.controllers.mpe import SessionRegistry
from mediaengine.controllers.runtime import Controller, Key, ReconcileResult
from mediaengine.events import task_subject
from mediaengine.store import NotFound, ResourceStore, WatchEvent

logger = logging.getLogger("mediaengine.controllers.task")

FINALIZER = model.GROUP + "/task-controller"
LABEL_NAMESPACE = model.GROUP + "/task-namespace"


class ResolutionError(Exception):
    pass


class TaskController:
    def __init__(self, store: ResourceStore, registry: SessionRegistry,
                 event_log_root: str = "", max_concurrent: int = 1,
                 reenter_job_pending_on_delete: bool = False):
        self.store = store
        self.registry = registry
        self.event_log_root = event_log_root
        # a deleted backend job is normally re-created within Running; this
        # flag instead moves the task back to JobPending first
        self.reenter_job_pending_on_delete = reenter_job_pending_on_delete
        self.controller = Controller("task", self.reconcile, max_concurrent=max_concurrent)
        self.controller.watch_store(store, model.KIND_TASK)
        self.controller.watch_store(store, model.KIND_WORKFLOW, mapper=self._workflow_to_tasks)

    def start(self, stop) -> None:
        self.controller.start(stop)

    def enqueue_task(self, namespace: str, name: str) -> None:
        """Generic event entry point used by the job watcher."""
        self.controller.enqueue((model.KIND_TASK, namespace, name))

    def _workflow_to_tasks(self, event: WatchEvent) -> list[Key]:
        workflow = event.resource
        namespace = workflow["metadata"].get("namespace", "")
        tasks = self.store.list(model.KIND_TASK, namespace=namespace,
                                selector={model.LABEL_WORKFLOW: workflow["metadata"]["name"]})
        return [(model.KIND_TASK, namespace, t["metadata"]["name"]) for t in tasks]

    # -- reconcile ---------------------------------------------------------------

    def reconcile(self, key: Key) -> ReconcileResult:
        _, namespace, name = key
        try:
            task = self.store.get(model.KIND_TASK, namespace, name)
        except NotFound:
            return ReconcileResult.done()

        meta = task["metadata"]
        if FINALIZER not in meta.get("finalizers", []) and not meta.get("deletionTimestamp"):
            meta.setdefault("finalizers", []).append(FINALIZER)
            self.store.patch(task, expected_version=task["metadata"]["resourceVersion"])
            return ReconcileResult.done()

        if self._normalize_status_refs(task):
            return ReconcileResult.done()

        if meta.get("deletionTimestamp"):
            return self._reconcile_delete(task)
        return self._reconcile_normal(task)

    def _normalize_status_refs(self, task: dict) -> bool:
        """Fill missing fields of previously persisted status references."""
        status = copy.deepcopy(task.get("status") or {})
        changed = False
        for field_name, kinds in (("mpeRef", (model.KIND_MPE, model.KIND_CLUSTER_MPE)),
                                  ("functionRef", (model.KIND_FUNCTION, model.KIND_CLUSTER_FUNCTION))):
            ref = status.get(field_name)
            if not ref or ref.get("uid"):
                continue
            for kind in kinds:
                ns = "" if kind.startswith("Cluster") else ref.get("namespace", task["metadata"].get("namespace", ""))
                try:
                    resource = self.store.get(kind, ns, ref.get("name", ""))
                except NotFound:
                    continue
                status[field_name] = model.exact_ref(resource)
                changed = True
                break
        if changed:
            self._patch_status(task, status)
        return changed

    # -- delete -----------------------------------------------------------------

    def _reconcile_delete(self, task: dict) -> ReconcileResult:
        meta = task["metadata"]
        status = task.get("status") or {}
        session = None
        mpe_ref = status.get("mpeRef")
        if mpe_ref:
            session = self.registry.get_by_ref(mpe_ref)
        if session is not None and session.alive:
            session.delete_job(meta["name"])
        if FINALIZER in meta.get("finalizers", []):
            meta["finalizers"] = [f for f in meta["finalizers"] if f != FINALIZER]
            self.store.patch(task, expected_version=task["metadata"]["resourceVersion"])
        return ReconcileResult.done()

    # -- normal ------------------------------------------------------------------

    def _reconcile_normal(self, task: dict) -> ReconcileResult:
        meta = task["metadata"]
        namespace = meta.get("namespace", "")
        workflow_name = ((task.get("spec") or {}).get("workflowRef") or {}).get("name", "")
        try:
            workflow = self.store.get(model.KIND_WORKFLOW, namespace, workflow_name)
        except NotFound:
            raise ResolutionError(f"workflow {workflow_name!r} not found")

        # sync to workflow: owner reference plus common labels
        changed = False
        owner_refs = meta.get("ownerReferences") or []
        if not any(ref.get("uid") == workflow["metadata"]["uid"] for ref in owner_refs):
            owner_refs.append(model.owner_ref(workflow))
            meta["ownerReferences"] = owner_refs
            changed = True
        labels = meta.get("labels") or {}
        wanted = {
            model.LABEL_WORKFLOW: workflow_name,
            model.LABEL_TASK: meta["name"],
            model.LABEL_MANAGED_BY: model.MANAGED_BY_VALUE,
        }
        if any(labels.get(k) != v for k, v in wanted.items()):
            labels.update(wanted)
            meta["labels"] = labels
            changed = True
        if changed:
            self.store.patch(task, expected_version=task["metadata"]["resourceVersion"])
            return ReconcileResult.done()

        status = copy.deepcopy(task.get("status") or {})
        phase = status.get("phase", "")

        # a terminal or deleting workflow fails still-active tasks
        wf_phase = (workflow.get("status") or {}).get("phase", "")
        wf_deleting = bool(workflow["metadata"].get("deletionTimestamp"))
        if phase not in model.TASK_TERMINAL and (wf_phase in model.WF_TERMINAL or wf_deleting):
            status["phase"] = model.TASK_FAILED
            if not status.get("endTime"):
                status["endTime"] = model.now_iso()
            model.set_condition(status, "Failed", "True", reason="WorkflowTerminated",
                                message=f"workflow is {wf_phase or 'being deleted'}")
            self._patch_status(task, status)
            return ReconcileResult.done()

        if not status.get("queuedTime") or not status.get("phase"):
            if not status.get("queuedTime"):
                status["queuedTime"] = model.now_iso()
            if not status.get("phase"):
                status["phase"] = model.TASK_INITIALIZING
            self._patch_status(task, status)
            return ReconcileResult.done()

        if phase == model.TASK_INITIALIZING:
            return self._phase_initializing(task, status)
        if phase == model.TASK_JOB_PENDING:
            return self._phase_job_pending(task, workflow, status)
        if phase == model.TASK_RUNNING:
            return self._phase_running(task, workflow, status)
        return self._phase_terminal(task, status)

    # -- resolution ----------------------------------------------------------------

    def _resolve(self, kinds: tuple[str, str], namespace: str,
                 ref: dict | None, selector: dict | None) -> dict | None:
        namespaced_kind, cluster_kind = kinds
        if ref and ref.get("name"):
            wanted_kind = ref.get("kind")
            for kind in (namespaced_kind, cluster_kind):
                if wanted_kind and kind != wanted_kind:
                    continue
                try:
                    return self.store.get(kind, "" if kind == cluster_kind else namespace, ref["name"])
                except NotFound:
                    continue
            return None
        if selector:
            for kind, ns in ((namespaced_kind, namespace), (cluster_kind, "")):
                matches = self.store.list(kind, namespace=ns, selector=selector)
                if matches:
                    return matches[0]
            return None
        return None

    def _resolve_template(self, task: dict) -> dict | None:
        ref = (task.get("spec") or {}).get("taskTemplateRef") or {}
        if not ref.get("name"):
            return None
        namespace = task["metadata"].get("namespace", "")
        template = self._resolve((model.KIND_TASK_TEMPLATE, model.KIND_CLUSTER_TASK_TEMPLATE),
                                 namespace, ref, None)
        if template is None:
            raise ResolutionError(f"task template {ref['name']!r} not found")
        return template

    def _default_mpe(self, namespace: str) -> dict | None:
        for kind, ns in ((model.KIND_MPE, namespace), (model.KIND_CLUSTER_MPE, "")):
            for mpe in self.store.list(kind, namespace=ns):
                annotations = mpe["metadata"].get("annotations") or {}
                if annotations.get(model.ANNOTATION_DEFAULT_MPE) == "true":
                    return mpe
        return None

    def _phase_initializing(self, task: dict, status: dict) -> ReconcileResult:
        spec = task.get("spec") or {}
        namespace = task["metadata"].get("namespace", "")
        template = self._resolve_template(task)
        template_spec = (template or {}).get("spec") or {}

        mpe = self._resolve((model.KIND_MPE, model.KIND_CLUSTER_MPE), namespace,
                            spec.get("mpeRef"), spec.get("mpeSelector"))
        if mpe is None and template is not None:
            mpe = self._resolve((model.KIND_MPE, model.KIND_CLUSTER_MPE), namespace,
                                template_spec.get("mpeRef"), template_spec.get("mpeSelector"))
        if mpe is None:
            mpe = self._default_mpe(namespace)
        if mpe is None:
            self._set_message(task, status, "no MPE matched the task specification")
            raise ResolutionError("no MPE matched")

        function = self._resolve((model.KIND_FUNCTION, model.KIND_CLUSTER_FUNCTION), namespace,
                                 spec.get("functionRef"), spec.get("functionSelector"))
        if function is None and template is not None:
            function = self._resolve((model.KIND_FUNCTION, model.KIND_CLUSTER_FUNCTION), namespace,
                                     template_spec.get("functionRef"), template_spec.get("functionSelector"))
        if function is None:
            self._set_message(task, status, "no function matched the task specification")
            raise ResolutionError("no function matched")
        if (function.get("spec") or {}).get("localMPEOnly") and "remote" in (mpe.get("spec") or {}):
            self._set_message(task, status, f"function {function['metadata']['name']} is restricted to local MPEs")
            raise ResolutionError("function restricted to local MPE")

        status["mpeRef"] = model.exact_ref(mpe)
        status["functionRef"] = model.exact_ref(function)
        if template is not None:
            status["taskTemplateRef"] = model.exact_ref(template)
        status["phase"] = model.TASK_JOB_PENDING
        model.set_condition(status, "Initialized", "True", reason="Resolved",
                            message=f"mpe={mpe['metadata']['name']} function={function['metadata']['name']}")
        self._patch_status(task, status)
        return ReconcileResult.done()

    # -- job provisioning ------------------------------------------------------------

    def _ensure_job(self, task: dict, workflow: dict, status: dict):
        meta = task["metadata"]
        namespace = meta.get("namespace", "")
        mpe_ref = status.get("mpeRef") or {}
        session = self.registry.get_by_ref(mpe_ref)
        if session is None or not session.alive:
            raise ResolutionError(f"backend session for MPE {mpe_ref.get('name')!r} is not open")

        function = self._get_by_ref(status.get("functionRef"), (model.KIND_FUNCTION, model.KIND_CLUSTER_FUNCTION), namespace)
        if function is None:
            raise ResolutionError("resolved function disappeared")
        template = None
        if status.get("taskTemplateRef"):
            template = self._get_by_ref(status["taskTemplateRef"],
                                        (model.KIND_TASK_TEMPLATE, model.KIND_CLUSTER_TASK_TEMPLATE), namespace)

        # stable service endpoints for this task and every peer it talks to
        session.ensure_service(meta["name"])
        for binding in (task["spec"].get("inputPortBindings") or []) + (task["spec"].get("outputPortBindings") or []):
            url = (binding.get("media") or {}).get("url", "")
            if model.is_engine_url(url):
                parsed = model.parse_engine_url(url)
                if isinstance(parsed, model.TaskURL):
                    session.ensure_service(convert.task_resource_name(parsed.workflow_id, parsed.task_id))

        event_log = None
        if self.event_log_root:
            event_log = convert.EventLogConnection(
                root=self.event_log_root,
                subject=task_subject(workflow["metadata"]["name"], meta["name"]),
            )
        data = convert.build_helper_data(
            workflow, task, function,
            task_template=template,
            locate_media_location=lambda name: self._resolve(
                (model.KIND_MEDIA_LOCATION, model.KIND_CLUSTER_MEDIA_LOCATION), namespace, {"name": name}, None),
            resolve_endpoint=lambda peer: session.ensure_service(peer),
            event_log=event_log,
        )
        data_path = session.provision_data(meta["name"], json.dumps(data, sort_keys=True).encode())

        merged = model.merge_job_templates(
            (function.get("spec") or {}).get("template"),
            ((template or {}).get("spec") or {}).get("templatePatches"),
            (task["spec"].get("templatePatches")),
        )
        labels = {
            model.LABEL_WORKFLOW: workflow["metadata"]["name"],
            model.LABEL_TASK: meta["name"],
            model.LABEL_MANAGED_BY: model.MANAGED_BY_VALUE,
            LABEL_NAMESPACE: namespace,
        }
        job_spec = backendmod.JobSpec(
            name=meta["name"],
            command=list(merged.get("command") or []),
            args=list(merged.get("args") or []),
            env=dict(merged.get("env") or {}),
            workdir=merged.get("workdir", ""),
            backoff_limit=int(merged.get("backoffLimit") or 0),
            data_file_path=data_path,
            labels=labels,
        )
        return session, session.ensure_job(job_spec)

    def _get_by_ref(self, ref: dict | None, kinds: tuple[str, str], namespace: str) -> dict | None:
        if not ref:
            return None
        return self._resolve(kinds, namespace, ref, None)

    def _phase_job_pending(self, task: dict, workflow: dict, status: dict) -> ReconcileResult:
        try:
            _, job_status = self._ensure_job(task, workflow, status)
        except backendmod.SpawnFailed as e:
            self._set_message(task, status, str(e))
            raise
        status["jobRef"] = {"name": task["metadata"]["name"]}
        if not status.get("startTime"):
            status["startTime"] = model.now_iso()
        status["phase"] = model.TASK_RUNNING
        model.set_condition(status, "Ready", "True", reason="JobEnsured", message="")
        self._patch_status(task, status)
        return ReconcileResult.done()

    def _phase_running(self, task: dict, workflow: dict, status: dict) -> ReconcileResult:
        if self.reenter_job_pending_on_delete:
            mpe_ref = status.get("mpeRef") or {}
            session = self.registry.get_by_ref(mpe_ref)
            if session is not None and session.alive and session.job_status(task["metadata"]["name"]) is None:
                status["phase"] = model.TASK_JOB_PENDING
                self._patch_status(task, status)
                return ReconcileResult.done()
        session, job_status = self._ensure_job(task, workflow, status)
        if job_status.phase == backendmod.SUCCEEDED:
            status["phase"] = model.TASK_SUCCEEDED
            model.set_condition(status, "Complete", "True", reason="JobSucceeded", message="")
            model.set_condition(status, "Ready", "False", reason="Terminated", message="")
        elif job_status.phase == backendmod.FAILED:
            status["phase"] = model.TASK_FAILED
            model.set_condition(status, "Failed", "True", reason="JobFailed", message=job_status.message)
            model.set_condition(status, "Ready", "False", reason="Terminated", message=job_status.message)
        else:
            return ReconcileResult.done()
        self._patch_status(task, status)
        return ReconcileResult.done()

    def _phase_terminal(self, task: dict, status: dict) -> ReconcileResult:
        meta = task["metadata"]
        mpe_ref = status.get("mpeRef")
        if mpe_ref:
            session = self.registry.get_by_ref(mpe_ref)
            if session is not None and session.alive:
                job = session.job_status(meta["name"])
                if job is not None and not job.terminal:
                    stop = getattr(session, "stop_job", None)
                    if stop is not None:
                        stop(meta["name"])
                    else:
                        session.delete_job(meta["name"])
        if not status.get("endTime"):
            status["endTime"] = model.now_iso()
            self._patch_status(task, status)
        return ReconcileResult.done()

    # -- helpers -----------------------------------------------------------------------

    def _set_message(self, task: dict, status: dict, message: str) -> None:
        model.set_condition(status, "Ready", "False", reason="ReconcileError", message=message)
        self._patch_status(task, status)

    def _patch_status(self, task: dict, status: dict) -> bool:
        if status == (task.get("status") or {}):
            return False
        update = {"kind": model.KIND_TASK, "metadata": task["metadata"], "status": status}
        try:
            self.store.patch(update, status=True)
        except NotFound:
            return False
        return True


class JobWatcher:
    """Consumes one backend session's job events and maps them to task
    reconciliations; terminal jobs get their engine hold released."""

    def __init__(self, session, task_controller: TaskController):
        self.session = session
        self.task_controller = task_controller

    def start(self, stop) -> None:
        import threading

        sub = self.session.subscribe_job_events()
        threading.Thread(target=lambda: (stop.wait(), sub.close()), daemon=True).start()
        while not stop.stopped:
            event = sub.get(timeout=0.2)
            if event is None:
                if sub.closed:
                    return
                continue
            labels = event.labels or {}
            if labels.get(model.LABEL_MANAGED_BY) != model.MANAGED_BY_VALUE:
                continue  # not an engine-managed job
            task_name = labels.get(model.LABEL_TASK)
            namespace = labels.get(LABEL_NAMESPACE, "")
            if not task_name:
                continue
            self.task_controller.enqueue_task(namespace, task_name)
            if event.phase in (backendmod.SUCCEEDED, backendmod.FAILED):
                self.session.release_job(event.name)
