"""Workflow controller.

Drives the workflow phase machine: Initializing until the first task becomes
active, Running while tasks execute, AwaitingCompletion once every task
terminated successfully (a configurable waiting window that absorbs races
where tasks are still being created), then Succeeded. A failed task whose
effective failure policy is FailWorkflow fails the whole workflow. Counters
(total, active, succeeded, failed) are recomputed from the live task census on
every status write.
"""

from __future__ import annotations

import copy
import logging
import time

from mediaengine import model
from mediaengine.controllers.runtime import Controller, Key, ReconcileResult
from mediaengine.store import NotFound, ResourceStore, WatchEvent

logger = logging.getLogger("mediaengine.controllers.workflow")

FINALIZER = model.GROUP + "/workflow-controller"


def task_census(store: ResourceStore, namespace: str, workflow_name: str) -> dict:
    tasks = store.list(model.KIND_TASK, namespace=namespace,
                       selector={model.LABEL_WORKFLOW: workflow_name})
    counters = {"total": len(tasks), "active": 0, "succeeded": 0, "failed": 0}
    for task in tasks:
        phase = (task.get("status") or {}).get("phase", "")
        if phase == model.TASK_SUCCEEDED:
            counters["succeeded"] += 1
        elif phase == model.TASK_FAILED:
            counters["failed"] += 1
        else:
            counters["active"] += 1
    return counters


def effective_failure_policy(store: ResourceStore, task: dict) -> str:
    spec = task.get("spec") or {}
    if spec.get("jobFailurePolicy"):
        return spec["jobFailurePolicy"]
    ref = spec.get("taskTemplateRef") or {}
    if ref.get("name"):
        namespace = task["metadata"].get("namespace", "")
        for kind, ns in ((model.KIND_TASK_TEMPLATE, namespace), (model.KIND_CLUSTER_TASK_TEMPLATE, "")):
            try:
                template = store.get(kind, ns, ref["name"])
            except NotFound:
                continue
            policy = (template.get("spec") or {}).get("jobFailurePolicy")
            if policy:
                return policy
    return model.POLICY_FAIL_WORKFLOW


class WorkflowController:
    def __init__(self, store: ResourceStore, termination_waiting_duration: float = 20.0,
                 max_concurrent: int = 1):
        self.store = store
        self.termination_waiting_duration = termination_waiting_duration
        self.controller = Controller("workflow", self.reconcile, max_concurrent=max_concurrent)
        self.controller.watch_store(store, model.KIND_WORKFLOW)
        self.controller.watch_store(store, model.KIND_TASK, mapper=self._task_to_workflow)

    def start(self, stop) -> None:
        self.controller.start(stop)

    @staticmethod
    def _task_to_workflow(event: WatchEvent) -> list[Key]:
        task = event.resource
        name = ((task.get("spec") or {}).get("workflowRef") or {}).get("name", "")
        if not name:
            name = (task["metadata"].get("labels") or {}).get(model.LABEL_WORKFLOW, "")
        if not name:
            return []
        return [(model.KIND_WORKFLOW, task["metadata"].get("namespace", ""), name)]

    # -- reconcile ------------------------------------------------------------

    def reconcile(self, key: Key) -> ReconcileResult:
        _, namespace, name = key
        try:
            workflow = self.store.get(model.KIND_WORKFLOW, namespace, name)
        except NotFound:
            return ReconcileResult.done()

        meta = workflow["metadata"]
        # internal init: initialize by adding the finalizer, persist, stop
        if FINALIZER not in meta.get("finalizers", []) and not meta.get("deletionTimestamp"):
            meta.setdefault("finalizers", []).append(FINALIZER)
            self.store.patch(workflow, expected_version=workflow["metadata"]["resourceVersion"])
            return ReconcileResult.done()

        if meta.get("deletionTimestamp"):
            return self._reconcile_delete(workflow)
        return self._reconcile_normal(workflow)

    def _reconcile_delete(self, workflow: dict) -> ReconcileResult:
        namespace = workflow["metadata"].get("namespace", "")
        name = workflow["metadata"]["name"]
        counters = task_census(self.store, namespace, name)
        status = copy.deepcopy(workflow.get("status") or {})
        status.update(counters)
        self._patch_status(workflow, status)
        if counters["active"] > 0:
            return ReconcileResult.after(0.05)
        meta = workflow["metadata"]
        if FINALIZER in meta.get("finalizers", []):
            meta["finalizers"] = [f for f in meta["finalizers"] if f != FINALIZER]
            self.store.patch(workflow, expected_version=workflow["metadata"]["resourceVersion"])
        return ReconcileResult.done()

    def _reconcile_normal(self, workflow: dict) -> ReconcileResult:
        meta = workflow["metadata"]
        labels = meta.get("labels") or {}
        wanted = {model.LABEL_WORKFLOW: meta["name"], model.LABEL_MANAGED_BY: model.MANAGED_BY_VALUE}
        if any(labels.get(k) != v for k, v in wanted.items()):
            labels.update(wanted)
            meta["labels"] = labels
            self.store.patch(workflow, expected_version=workflow["metadata"]["resourceVersion"])
            return ReconcileResult.done()

        status = copy.deepcopy(workflow.get("status") or {})
        if not status.get("queuedTime"):
            status["queuedTime"] = model.now_iso()
        if not status.get("phase"):
            status["phase"] = model.WF_INITIALIZING

        namespace = meta.get("namespace", "")
        counters = task_census(self.store, namespace, meta["name"])
        status.update(counters)

        # persist repairs and counter drift first; the phase handler runs on a
        # stable snapshot in the next iteration
        if self._patch_status(workflow, status):
            return ReconcileResult.done()

        phase = status["phase"]
        result = ReconcileResult.done()
        if phase == model.WF_INITIALIZING:
            if counters["active"] > 0:
                status["phase"] = model.WF_RUNNING
                if not status.get("startTime"):
                    status["startTime"] = model.now_iso()
                model.set_condition(status, "Ready", "True", reason="TasksActive", message="")
        elif phase == model.WF_RUNNING:
            blocking = self._blocking_failure(namespace, meta["name"])
            if blocking is not None:
                status["phase"] = model.WF_FAILED
                if not status.get("endTime"):
                    status["endTime"] = model.now_iso()
                model.set_condition(status, "Failed", "True", reason="TaskFailed", message=blocking)
                model.set_condition(status, "Ready", "False", reason="TaskFailed", message=blocking)
            elif counters["total"] > 0 and counters["active"] == 0:
                status["phase"] = model.WF_AWAITING_COMPLETION
                status["endTime"] = model.now_iso()
        elif phase == model.WF_AWAITING_COMPLETION:
            blocking = self._blocking_failure(namespace, meta["name"])
            if blocking is not None:
                status["phase"] = model.WF_FAILED
                if not status.get("endTime"):
                    status["endTime"] = model.now_iso()
                model.set_condition(status, "Failed", "True", reason="TaskFailed", message=blocking)
                model.set_condition(status, "Ready", "False", reason="TaskFailed", message=blocking)
            elif counters["active"] > 0:
                status["phase"] = model.WF_RUNNING
                status.pop("endTime", None)
            else:
                end = model.parse_iso(status.get("endTime") or model.now_iso())
                remaining = end + self.termination_waiting_duration - time.time()
                if remaining > 0:
                    result = ReconcileResult.after(remaining)
                else:
                    status["phase"] = model.WF_SUCCEEDED
                    model.set_condition(status, "Complete", "True", reason="AllTasksSucceeded", message="")
                    model.set_condition(status, "Ready", "False", reason="Terminated", message="")
        elif phase in model.WF_TERMINAL:
            if phase == model.WF_SUCCEEDED:
                model.set_condition(status, "Complete", "True", reason="AllTasksSucceeded", message="")
            if not status.get("endTime"):
                status["endTime"] = model.now_iso()

        self._patch_status(workflow, status)
        return result

    def _blocking_failure(self, namespace: str, workflow_name: str) -> str | None:
        tasks = self.store.list(model.KIND_TASK, namespace=namespace,
                                selector={model.LABEL_WORKFLOW: workflow_name})
        for task in tasks:
            if (task.get("status") or {}).get("phase") == model.TASK_FAILED:
                if effective_failure_policy(self.store, task) == model.POLICY_FAIL_WORKFLOW:
                    return f"task {task['metadata']['name']} failed"
        return None

    def _patch_status(self, workflow: dict, status: dict) -> bool:
        if status == (workflow.get("status") or {}):
            return False
        update = {"kind": model.KIND_WORKFLOW, "metadata": workflow["metadata"], "status": status}
        try:
            self.store.patch(update, status=True)
        except NotFound:
            return False
        return True
