"""NBMP workflow API gateway.

Serves CRUD for workflow description documents, translating between WDDs and
Workflow/Task resources in one configured namespace. Requests pass the
standard defaulter and lax validator plus an engine-specific validator that
rejects unsupported NBMP descriptors. Every non-2xx response body is a WDD
with a populated acknowledge object. The gateway keeps no state of its own;
everything lives in the store.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from mediaengine import convert, model, nbmp
from mediaengine.config import KIND_GATEWAY, register_config_kind, webserver_from_dict, InvalidConfig
from mediaengine.httpkit import HttpServer, Request, Response, WebserverConfig
from mediaengine.store import AlreadyExists, Conflict, NotFound, ResourceStore, ValidationRejected

logger = logging.getLogger("mediaengine.gateway")

WORKFLOWS_PATH = "/v2/workflows"


@dataclass
class GatewayConfig:
    webserver: WebserverConfig = field(default_factory=lambda: WebserverConfig(bind_address="127.0.0.1:0"))
    namespace: str = ""
    gpu_resource_name: str = ""


def decode_gateway_config(doc: dict) -> GatewayConfig:
    errors: list[str] = []
    config = GatewayConfig()
    config.webserver = webserver_from_dict(doc.get("webserver"), errors)
    config.namespace = str(doc.get("namespace", "") or "")
    config.gpu_resource_name = str(doc.get("gpuResourceName", "") or "")
    if not config.namespace:
        errors.append("namespace is required")
    if errors:
        raise InvalidConfig(errors)
    return config


register_config_kind(KIND_GATEWAY, decode_gateway_config)


def _error_wdd(workflow_id: str, status: str, failed: list[str] | None = None,
               unsupported: list[str] | None = None) -> bytes:
    d = nbmp.Description(document_kind=nbmp.WDD, general=nbmp.General(id=workflow_id))
    d.acknowledge = nbmp.make_acknowledge(status, failed=failed or [], unsupported=unsupported or [])
    return d.serialize()


class WorkflowService:
    """Business logic behind the workflow API routes."""

    def __init__(self, store: ResourceStore, namespace: str):
        self.store = store
        self.namespace = namespace
        model.register_engine_kinds(store)

    # -- validation pipeline --

    def _admit(self, body: bytes) -> nbmp.Description:
        d = nbmp.parse_document(body, nbmp.WDD)
        nbmp.default_description(d)
        violations = nbmp.validate_lax(d)
        if violations:
            raise nbmp.SchemaViolation(violations)
        return d

    def _engine_validate(self, d: nbmp.Description) -> list[str]:
        unsupported = []
        if d.repository is not None:
            unsupported.append("repository")
        return unsupported

    # -- operations --

    def create(self, body: bytes) -> nbmp.Description:
        d = self._admit(body)
        unsupported = self._engine_validate(d)
        if unsupported:
            raise UnsupportedFields(d.general.id, unsupported)
        workflow, tasks = convert.wdd_to_resources(d, self.namespace)
        self.store.create(workflow)
        for task in tasks:
            self.store.create(task)
        return self.retrieve(d.general.id)

    def retrieve(self, workflow_id: str) -> nbmp.Description:
        name = convert.sanitize_dns_label(workflow_id)
        workflow = self.store.get(model.KIND_WORKFLOW, self.namespace, name)
        tasks = self.store.list(model.KIND_TASK, namespace=self.namespace,
                                selector={model.LABEL_WORKFLOW: name})
        return convert.resources_to_wdd(workflow, tasks)

    def update(self, workflow_id: str, body: bytes) -> nbmp.Description:
        d = self._admit(body)
        unsupported = self._engine_validate(d)
        if unsupported:
            raise UnsupportedFields(workflow_id, unsupported)
        if d.general.id and d.general.id != workflow_id:
            raise nbmp.SchemaViolation([nbmp.Violation("general.id", "id does not match the request path")])
        d.general.id = workflow_id
        name = convert.sanitize_dns_label(workflow_id)
        stored = self.store.get(model.KIND_WORKFLOW, self.namespace, name)

        desired_workflow, desired_tasks = convert.wdd_to_resources(d, self.namespace)
        # apply the diff: workflow metadata and spec
        self._patch_with_retry(model.KIND_WORKFLOW, name, desired_workflow)

        existing = {t["metadata"]["name"]: t for t in self.store.list(
            model.KIND_TASK, namespace=self.namespace, selector={model.LABEL_WORKFLOW: name})}
        desired = {t["metadata"]["name"]: t for t in desired_tasks}
        for task_name, task in desired.items():
            if task_name not in existing:
                self.store.create(task)
            else:
                self._patch_with_retry(model.KIND_TASK, task_name, task)
        for task_name in existing:
            if task_name not in desired:
                try:
                    self.store.delete(model.KIND_TASK, self.namespace, task_name)
                except NotFound:
                    pass
        return self.retrieve(workflow_id)

    def _patch_with_retry(self, kind: str, name: str, desired: dict, attempts: int = 5) -> None:
        """Overwrite spec and converter annotations of a stored resource,
        re-reading on optimistic-concurrency conflicts so concurrent
        controller writes are never clobbered."""
        for attempt in range(attempts):
            current = self.store.get(kind, self.namespace, name)
            merged = dict(current)
            merged["spec"] = desired["spec"]
            meta = dict(current["metadata"])
            annotations = dict(meta.get("annotations") or {})
            annotations.update(desired["metadata"]["annotations"])
            meta["annotations"] = annotations
            merged["metadata"] = meta
            try:
                self.store.patch(merged, expected_version=current["metadata"]["resourceVersion"])
                return
            except Conflict:
                if attempt == attempts - 1:
                    raise

    def delete(self, workflow_id: str) -> nbmp.Description:
        name = convert.sanitize_dns_label(workflow_id)
        response = self.retrieve(workflow_id)
        self.store.delete(model.KIND_WORKFLOW, self.namespace, name)
        if response.acknowledge is None:
            response.acknowledge = nbmp.make_acknowledge(nbmp.ACK_OK)
        return response


class UnsupportedFields(Exception):
    def __init__(self, workflow_id: str, fields: list[str]):
        super().__init__(", ".join(fields))
        self.workflow_id = workflow_id
        self.fields = fields


class Gateway:
    """HTTP face of the workflow service."""

    def __init__(self, store: ResourceStore, config: GatewayConfig):
        self.config = config
        self.service = WorkflowService(store, config.namespace)
        self.server = HttpServer(config.webserver, name="gateway")
        self.server.mount_health(lambda: None)
        self.server.add_routes([
            ("POST", WORKFLOWS_PATH, self.handle_create),
            ("GET", WORKFLOWS_PATH + "/{id}", self.handle_retrieve),
            ("PATCH", WORKFLOWS_PATH + "/{id}", self.handle_update),
            ("PUT", WORKFLOWS_PATH + "/{id}", self.handle_update),
            ("DELETE", WORKFLOWS_PATH + "/{id}", self.handle_delete),
        ])

    def start(self, stop) -> None:
        self.server.start(stop)

    # -- handlers --

    def _wdd_response(self, status: int, d: nbmp.Description, location: str | None = None) -> Response:
        headers = {"Content-Type": "application/json"}
        if location:
            headers["Location"] = location
        return Response(status, headers=headers, body=d.serialize())

    def handle_create(self, request: Request) -> Response:
        try:
            d = self.service.create(request.body())
        except (nbmp.MalformedJson, nbmp.SchemaViolation) as e:
            return self._reject("", e)
        except UnsupportedFields as e:
            return Response.json(400, _error_wdd(e.workflow_id, nbmp.ACK_FAILED, unsupported=e.fields))
        except convert.UnsupportedDescriptor as e:
            return Response.json(400, _error_wdd("", nbmp.ACK_FAILED, unsupported=e.fields))
        except AlreadyExists:
            return Response.json(409, _error_wdd("", nbmp.ACK_FAILED, failed=["workflow id already exists"]))
        except (ValidationRejected, convert.ConvertError) as e:
            return Response.json(400, _error_wdd("", nbmp.ACK_FAILED, failed=[str(e)]))
        location = f"{self.server.base_url()}{WORKFLOWS_PATH}/{d.general.id}"
        return self._wdd_response(201, d, location=location)

    def handle_retrieve(self, request: Request) -> Response:
        workflow_id = request.params["id"]
        try:
            d = self.service.retrieve(workflow_id)
        except NotFound:
            return Response.json(404, _error_wdd(workflow_id, nbmp.ACK_FAILED, failed=["workflow not found"]))
        return self._wdd_response(200, d)

    def handle_update(self, request: Request) -> Response:
        workflow_id = request.params["id"]
        try:
            d = self.service.update(workflow_id, request.body())
        except NotFound:
            return Response.json(404, _error_wdd(workflow_id, nbmp.ACK_FAILED, failed=["workflow not found"]))
        except (nbmp.MalformedJson, nbmp.SchemaViolation) as e:
            return self._reject(workflow_id, e)
        except UnsupportedFields as e:
            return Response.json(400, _error_wdd(workflow_id, nbmp.ACK_FAILED, unsupported=e.fields))
        except convert.UnsupportedDescriptor as e:
            return Response.json(400, _error_wdd(workflow_id, nbmp.ACK_FAILED, unsupported=e.fields))
        except Conflict as e:
            return Response.json(409, _error_wdd(workflow_id, nbmp.ACK_FAILED, failed=[str(e)]))
        except (ValidationRejected, convert.ConvertError) as e:
            return Response.json(400, _error_wdd(workflow_id, nbmp.ACK_FAILED, failed=[str(e)]))
        return self._wdd_response(200, d)

    def handle_delete(self, request: Request) -> Response:
        workflow_id = request.params["id"]
        try:
            d = self.service.delete(workflow_id)
        except NotFound:
            return Response.json(404, _error_wdd(workflow_id, nbmp.ACK_FAILED, failed=["workflow not found"]))
        return self._wdd_response(200, d)

    def _reject(self, workflow_id: str, error: Exception) -> Response:
        if isinstance(error, nbmp.SchemaViolation):
            failed = [str(v) for v in error.violations]
        else:
            failed = [str(error)]
        return Response.json(400, _error_wdd(workflow_id, nbmp.ACK_FAILED, failed=failed))
