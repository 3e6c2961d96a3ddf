"""Engine resource model.

The internal resource types the controllers reconcile: MediaProcessingEntity,
Function, MediaLocation, TaskTemplate (each with a cluster-scoped variant),
Workflow and Task, plus the Condition pattern, the media stream binding shape
and the custom engine URL schemes used to address task and media-location
streams before they are resolved to concrete endpoints.
"""

from __future__ import annotations

import posixpath
import time
from dataclasses import dataclass
from typing import Any
from urllib.parse import parse_qsl, quote, unquote, urlencode, urlsplit, urlunsplit

GROUP = "engine.nagare.media"
API_VERSION = GROUP + "/v1alpha1"

KIND_WORKFLOW = "Workflow"
KIND_TASK = "Task"
KIND_MPE = "MediaProcessingEntity"
KIND_CLUSTER_MPE = "ClusterMediaProcessingEntity"
KIND_FUNCTION = "Function"
KIND_CLUSTER_FUNCTION = "ClusterFunction"
KIND_MEDIA_LOCATION = "MediaLocation"
KIND_CLUSTER_MEDIA_LOCATION = "ClusterMediaLocation"
KIND_TASK_TEMPLATE = "TaskTemplate"
KIND_CLUSTER_TASK_TEMPLATE = "ClusterTaskTemplate"

NAMESPACED_KINDS = [KIND_WORKFLOW, KIND_TASK, KIND_MPE, KIND_FUNCTION, KIND_MEDIA_LOCATION, KIND_TASK_TEMPLATE]
CLUSTER_KINDS = [KIND_CLUSTER_MPE, KIND_CLUSTER_FUNCTION, KIND_CLUSTER_MEDIA_LOCATION, KIND_CLUSTER_TASK_TEMPLATE]

LABEL_WORKFLOW = GROUP + "/workflow-name"
LABEL_TASK = GROUP + "/task-name"
LABEL_MANAGED_BY = GROUP + "/managed-by"
MANAGED_BY_VALUE = "workflow-manager"
ANNOTATION_DEFAULT_MPE = GROUP + "/is-default-mpe"
ANNOTATION_NBMP_IO = GROUP + "/nbmp-io"

# Workflow phases
WF_INITIALIZING = "Initializing"
WF_RUNNING = "Running"
WF_AWAITING_COMPLETION = "AwaitingCompletion"
WF_SUCCEEDED = "Succeeded"
WF_FAILED = "Failed"
WF_TERMINAL = {WF_SUCCEEDED, WF_FAILED}

# Task phases
TASK_INITIALIZING = "Initializing"
TASK_JOB_PENDING = "JobPending"
TASK_RUNNING = "Running"
TASK_SUCCEEDED = "Succeeded"
TASK_FAILED = "Failed"
TASK_TERMINAL = {TASK_SUCCEEDED, TASK_FAILED}
TASK_ACTIVE = {TASK_INITIALIZING, TASK_JOB_PENDING, TASK_RUNNING, ""}

# Job failure policies
POLICY_FAIL_WORKFLOW = "FailWorkflow"
POLICY_IGNORE = "Ignore"

# Engine URL schemes
SCHEME_TASK = "nme-task"
SCHEME_MEDIA_LOCATION = "nme-medialocation"
HEADER_QUERY_PREFIX = "nme-hdr-"


class ModelError(Exception):
    pass


class NotEngineURL(ModelError):
    """The URL is an ordinary URL, not one of the engine schemes."""


class MalformedEngineURL(ModelError):
    pass


class PathEscapesBase(ModelError):
    pass


def now_iso() -> str:
    now = time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(now)) + f".{int(now % 1 * 1e6):06d}Z"


def parse_iso(value: str) -> float:
    """RFC3339 UTC timestamp (with or without fractional seconds) to epoch."""
    import calendar

    base, _, frac = value.rstrip("Z").partition(".")
    epoch = float(calendar.timegm(time.strptime(base, "%Y-%m-%dT%H:%M:%S")))
    if frac:
        epoch += float("0." + frac)
    return epoch


def new_resource(kind: str, name: str, namespace: str = "", spec: dict | None = None,
                 labels: dict | None = None, annotations: dict | None = None) -> dict:
    return {
        "apiVersion": API_VERSION,
        "kind": kind,
        "metadata": {
            "name": name,
            "namespace": namespace,
            "labels": labels or {},
            "annotations": annotations or {},
        },
        "spec": spec or {},
        "status": {},
    }


def local_ref(kind: str, name: str) -> dict:
    return {"apiVersion": API_VERSION, "kind": kind, "name": name}


def object_ref(kind: str, name: str, namespace: str) -> dict:
    return {"apiVersion": API_VERSION, "kind": kind, "name": name, "namespace": namespace}


def exact_ref(resource: dict) -> dict:
    meta = resource["metadata"]
    return {
        "apiVersion": resource.get("apiVersion", API_VERSION),
        "kind": resource["kind"],
        "name": meta["name"],
        "namespace": meta.get("namespace", ""),
        "uid": meta["uid"],
    }


def owner_ref(resource: dict) -> dict:
    return exact_ref(resource)


# -- conditions ---------------------------------------------------------------

def get_condition(status: dict, cond_type: str) -> dict | None:
    for c in status.get("conditions", []):
        if c.get("type") == cond_type:
            return c
    return None


def set_condition(status: dict, cond_type: str, value: str, reason: str = "", message: str = "") -> dict:
    """Replace the same-type condition; lastTransitionTime only moves when the
    status value actually flips."""
    conditions = status.setdefault("conditions", [])
    for c in conditions:
        if c.get("type") == cond_type:
            if c.get("status") != value:
                c["lastTransitionTime"] = now_iso()
            c["status"] = value
            c["reason"] = reason
            c["message"] = message
            return status
    conditions.append({
        "type": cond_type,
        "status": value,
        "reason": reason,
        "message": message,
        "lastTransitionTime": now_iso(),
    })
    return status


# -- engine URLs ----------------------------------------------------------------

@dataclass(frozen=True)
class TaskURL:
    workflow_id: str
    task_id: str
    port_name: str

    def __str__(self) -> str:
        return f"{SCHEME_TASK}://{quote(self.workflow_id, safe='')}/{quote(self.task_id, safe='')}/{quote(self.port_name, safe='')}"


@dataclass(frozen=True)
class MediaLocationURL:
    location_name: str
    path: str

    def __str__(self) -> str:
        return f"{SCHEME_MEDIA_LOCATION}://{quote(self.location_name, safe='')}/{quote(self.path, safe='/')}"


def is_engine_url(url: str) -> bool:
    scheme = urlsplit(url).scheme
    return scheme in (SCHEME_TASK, SCHEME_MEDIA_LOCATION)


def parse_engine_url(url: str) -> TaskURL | MediaLocationURL:
    parts = urlsplit(url)
    if parts.scheme == SCHEME_TASK:
        segments = [s for s in parts.path.split("/") if s]
        if not parts.netloc or len(segments) != 2:
            raise MalformedEngineURL(f"task URL needs workflow/task/port: {url!r}")
        return TaskURL(unquote(parts.netloc), unquote(segments[0]), unquote(segments[1]))
    if parts.scheme == SCHEME_MEDIA_LOCATION:
        if not parts.netloc:
            raise MalformedEngineURL(f"media-location URL needs a location name: {url!r}")
        return MediaLocationURL(unquote(parts.netloc), unquote(parts.path.lstrip("/")))
    raise NotEngineURL(url)


# -- media locations -----------------------------------------------------------

def resolve_media_location_url(location: dict, path: str) -> str:
    """Resolve a media-location reference plus path to a concrete URL.

    HTTP locations join the base URL with the path and append configured query
    parameters; headers and auth are conveyed as reserved nme-hdr- query
    parameters that the IO layer strips and applies to the outbound request.
    S3 locations produce an s3:// URL embedding bucket, region and endpoint.
    """
    spec = location.get("spec", location)
    norm = posixpath.normpath(path.lstrip("/")) if path.strip("/") else ""
    if norm == ".":
        norm = ""
    if norm == ".." or norm.startswith("../"):
        raise PathEscapesBase(path)
    if "http" in spec:
        http = spec["http"]
        base = http["baseURL"]
        parts = urlsplit(base)
        base_path = parts.path.rstrip("/")
        joined = posixpath.normpath(f"{base_path}/{norm}") if norm else (base_path or "/")
        if not joined.startswith(base_path):
            raise PathEscapesBase(path)
        query = dict(parse_qsl(parts.query))
        query.update(http.get("queryParams") or {})
        for header, value in (http.get("headers") or {}).items():
            query[HEADER_QUERY_PREFIX + header] = value
        auth = http.get("basicAuth")
        if auth:
            query[HEADER_QUERY_PREFIX + "Authorization"] = "Basic " + _basic_auth_value(auth)
        token = http.get("token")
        if token:
            query[HEADER_QUERY_PREFIX + "Authorization"] = "Bearer " + token
        return urlunsplit((parts.scheme, parts.netloc, joined, urlencode(query), ""))
    if "s3" in spec:
        s3 = spec["s3"]
        query = {}
        if s3.get("region"):
            query["region"] = s3["region"]
        if s3.get("endpointURL"):
            query["endpoint"] = s3["endpointURL"]
        return urlunsplit(("s3", s3["bucket"], "/" + norm, urlencode(query), ""))
    raise ModelError("media location defines neither http nor s3")


def _basic_auth_value(auth: dict) -> str:
    import base64

    raw = f"{auth.get('username', '')}:{auth.get('password', '')}".encode()
    return base64.b64encode(raw).decode()


def strip_reserved_headers(url: str) -> tuple[str, dict[str, str]]:
    """Split reserved nme-hdr- query params off a URL into a header map."""
    parts = urlsplit(url)
    headers: dict[str, str] = {}
    remaining = []
    for k, v in parse_qsl(parts.query):
        if k.startswith(HEADER_QUERY_PREFIX):
            headers[k[len(HEADER_QUERY_PREFIX):]] = v
        else:
            remaining.append((k, v))
    clean = urlunsplit((parts.scheme, parts.netloc, parts.path, urlencode(remaining), parts.fragment))
    return clean, headers


# -- job templates ---------------------------------------------------------------

def merge_job_templates(base: dict | None, *overlays: dict | None) -> dict:
    """Merge process templates: later wins per field, env merged by name,
    args merged by position."""
    merged: dict[str, Any] = dict(base or {})
    merged["env"] = dict((base or {}).get("env") or {})
    merged["args"] = list((base or {}).get("args") or [])
    for overlay in overlays:
        if not overlay:
            continue
        for f in ("command", "workdir", "backoffLimit"):
            if f in overlay:
                merged[f] = overlay[f]
        if "env" in overlay:
            merged["env"].update(overlay["env"] or {})
        if "args" in overlay:
            new_args = overlay["args"] or []
            for i, arg in enumerate(new_args):
                if i < len(merged["args"]):
                    merged["args"][i] = arg
                else:
                    merged["args"].append(arg)
    return merged


# -- admission hooks -------------------------------------------------------------

def _mpe_validator(resource: dict) -> tuple[list[str], list[str]]:
    spec = resource.get("spec", {})
    errors, warnings = [], []
    has_local = "local" in spec
    has_remote = "remote" in spec
    if has_local == has_remote:
        errors.append("spec must define exactly one of local or remote")
    if has_remote and not (spec["remote"].get("connectionSecretRef") or {}).get("name"):
        errors.append("spec.remote.connectionSecretRef.name is required")
    return errors, warnings


def _function_defaulter(resource: dict) -> None:
    spec = resource.setdefault("spec", {})
    spec.setdefault("version", "0.0.0")
    spec.setdefault("defaultConfig", {})
    spec.setdefault("localMPEOnly", False)


def _function_validator(resource: dict) -> tuple[list[str], list[str]]:
    spec = resource.get("spec", {})
    errors = []
    template = spec.get("template") or {}
    if not template.get("command"):
        errors.append("spec.template.command must be non-empty")
    return errors, []


def _media_location_validator(resource: dict) -> tuple[list[str], list[str]]:
    spec = resource.get("spec", {})
    errors = []
    has_http = "http" in spec
    has_s3 = "s3" in spec
    if has_http == has_s3:
        errors.append("spec must define exactly one of http or s3")
    if has_http:
        base = spec["http"].get("baseURL", "")
        parts = urlsplit(base)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            errors.append(f"spec.http.baseURL must be an absolute http(s) URL, got {base!r}")
    if has_s3 and not spec["s3"].get("bucket"):
        errors.append("spec.s3.bucket is required")
    return errors, []


def _ref_selector_errors(spec: dict, base: str) -> list[str]:
    errors = []
    if spec.get(base + "Ref") and spec.get(base + "Selector"):
        errors.append(f"at most one of spec.{base}Ref and spec.{base}Selector may be set")
    return errors


def _task_template_validator(resource: dict) -> tuple[list[str], list[str]]:
    spec = resource.get("spec", {})
    errors = _ref_selector_errors(spec, "mpe") + _ref_selector_errors(spec, "function")
    policy = spec.get("jobFailurePolicy")
    if policy and policy not in (POLICY_FAIL_WORKFLOW, POLICY_IGNORE):
        errors.append(f"spec.jobFailurePolicy must be {POLICY_FAIL_WORKFLOW} or {POLICY_IGNORE}")
    return errors, []


def _task_template_defaulter(resource: dict) -> None:
    resource.setdefault("spec", {}).setdefault("jobFailurePolicy", POLICY_FAIL_WORKFLOW)


def _task_validator(resource: dict) -> tuple[list[str], list[str]]:
    spec = resource.get("spec", {})
    errors = _ref_selector_errors(spec, "mpe") + _ref_selector_errors(spec, "function")
    if not (spec.get("workflowRef") or {}).get("name"):
        errors.append("spec.workflowRef.name is required")
    for field in ("inputPortBindings", "outputPortBindings"):
        for i, binding in enumerate(spec.get(field) or []):
            if not binding.get("portName"):
                errors.append(f"spec.{field}[{i}].portName is required")
            media = binding.get("media") or {}
            if not media.get("id"):
                errors.append(f"spec.{field}[{i}].media.id is required")
            if media.get("direction") == "pull" and not media.get("url"):
                errors.append(f"spec.{field}[{i}].media.url is required for pull streams")
    return errors, []


def _task_defaulter(resource: dict) -> None:
    spec = resource.setdefault("spec", {})
    spec.setdefault("config", {})
    for field in ("inputPortBindings", "outputPortBindings"):
        for binding in spec.get(field) or []:
            media = binding.setdefault("media", {})
            media.setdefault("direction", "push")
            media.setdefault("type", "media")


def register_engine_kinds(store) -> None:
    """Register all engine kinds and their admission hooks on a store."""
    for kind in NAMESPACED_KINDS:
        store.register_kind(kind)
    for kind in CLUSTER_KINDS:
        store.register_kind(kind, cluster_scoped=True)
    for kind in (KIND_MPE, KIND_CLUSTER_MPE):
        store.register_admission(kind, validator=_mpe_validator)
    for kind in (KIND_FUNCTION, KIND_CLUSTER_FUNCTION):
        store.register_admission(kind, defaulter=_function_defaulter, validator=_function_validator)
    for kind in (KIND_MEDIA_LOCATION, KIND_CLUSTER_MEDIA_LOCATION):
        store.register_admission(kind, validator=_media_location_validator)
    for kind in (KIND_TASK_TEMPLATE, KIND_CLUSTER_TASK_TEMPLATE):
        store.register_admission(kind, defaulter=_task_template_defaulter, validator=_task_template_validator)
    store.register_admission(KIND_TASK, defaulter=_task_defaulter, validator=_task_validator)
