"""Transformations between NBMP documents and engine resources.

wdd_to_resources turns a defaulted, lax-valid WDD into one Workflow resource
plus one Task resource per processing entry; the connection map becomes port
bindings carrying engine task URLs for task-to-task edges and the declared
stream URLs for workflow inputs and outputs. resources_to_wdd is the reverse,
used when formulating API responses. build_helper_data aggregates everything a
task's helper sidecar needs, with every engine URL already resolved, and
build_tdd renders that data as the TDD sent over the NBMP task API.

NBMP fields that do not map onto resources (stream descriptors, requirement,
reporting, unknown fields) ride along in resource annotations so the reverse
transformation can reproduce them.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Callable

from mediaengine import model, nbmp
from mediaengine.model import (
    ANNOTATION_NBMP_IO,
    GROUP,
    KIND_TASK,
    KIND_WORKFLOW,
    LABEL_WORKFLOW,
    MediaLocationURL,
    TaskURL,
    is_engine_url,
    parse_engine_url,
    resolve_media_location_url,
)

ANNOTATION_WORKFLOW_ID = GROUP + "/nbmp-workflow-id"
ANNOTATION_TASK_ID = GROUP + "/nbmp-task-id"
ANNOTATION_TASK_EXTRA = GROUP + "/nbmp-task-extra"

REPORT_TYPE = "nagare-media-engine-cloudevents"
CONFIG_KEY_WORKFLOW_ID = "nme-workflow-id"

HELPER_DATA_KIND = "WorkflowManagerHelperData"


class ConvertError(Exception):
    pass


class UnsupportedDescriptor(ConvertError):
    def __init__(self, fields: list[str]):
        super().__init__("unsupported descriptors: " + ", ".join(fields))
        self.fields = fields


class UnresolvedConnection(ConvertError):
    pass


class UnknownMediaLocation(ConvertError):
    pass


class UnknownPeerTask(ConvertError):
    pass


_DNS_INVALID = re.compile(r"[^a-z0-9-]+")


def sanitize_dns_label(value: str) -> str:
    out = _DNS_INVALID.sub("-", value.lower()).strip("-")
    return out[:63] or "x"


def task_resource_name(workflow_id: str, task_id: str) -> str:
    return sanitize_dns_label(f"{workflow_id}-{task_id}")


def _edge_stream_id(c: nbmp.Connection) -> str:
    if c.connection_id:
        return c.connection_id
    return f"{c.from_.id}.{c.from_.port_name}-{c.to.id}.{c.to.port_name}"


def _stream_media(params: nbmp.StreamParameters, media_type: str, url: str) -> dict:
    media: dict[str, Any] = {
        "id": params.stream_id,
        "type": media_type,
        "direction": params.mode or nbmp.MODE_PUSH,
        "url": url,
    }
    metadata = {}
    if params.mime_type:
        metadata["mimeType"] = params.mime_type
    if params.codec_type:
        metadata["codecType"] = params.codec_type
    if params.bitrate is not None:
        metadata["bitRate"] = params.bitrate
    if metadata:
        media["metadata"] = metadata
    return media


def wdd_to_resources(wdd: nbmp.Description, namespace: str) -> tuple[dict, list[dict]]:
    """One Workflow plus one Task per processing entry.

    The WDD must be defaulted and lax-valid. Repository descriptors are
    rejected outright.
    """
    if wdd.repository is not None:
        raise UnsupportedDescriptor(["repository"])
    wf_id = wdd.general.id
    if not wf_id:
        raise ConvertError("general.id must not be empty")
    wf_name = sanitize_dns_label(wf_id)

    baggage: dict[str, Any] = {}
    inp = wdd.input.to_json()
    outp = wdd.output.to_json()
    if inp:
        baggage["input"] = inp
    if outp:
        baggage["output"] = outp
    if wdd.general.extra:
        baggage["general-extra"] = wdd.general.extra
    general_ports = {}
    if wdd.general.input_ports:
        general_ports["input-ports"] = [p.to_json() for p in wdd.general.input_ports]
    if wdd.general.output_ports:
        general_ports["output-ports"] = [p.to_json() for p in wdd.general.output_ports]
    if general_ports:
        baggage["general-ports"] = general_ports
    if wdd.requirement is not None:
        baggage["requirement"] = wdd.requirement
    if wdd.reporting is not None:
        baggage["reporting"] = wdd.reporting.to_json()
    if wdd.processing.extra:
        baggage["processing-extra"] = wdd.processing.extra
    if wdd.extra:
        baggage["extra"] = wdd.extra

    workflow = model.new_resource(
        KIND_WORKFLOW,
        wf_name,
        namespace,
        spec={"humanReadable": {"name": wdd.general.name, "description": wdd.general.description}},
        labels={LABEL_WORKFLOW: wf_name},
        annotations={
            ANNOTATION_WORKFLOW_ID: wf_id,
            ANNOTATION_NBMP_IO: json.dumps(baggage, sort_keys=True),
        },
    )

    input_ids = {p.stream_id for p in wdd.input.all_parameters()}
    output_ids = {p.stream_id for p in wdd.output.all_parameters()}
    instances = {r.instance for r in wdd.processing.function_restrictions}

    input_bindings: dict[str, list[dict]] = {t: [] for t in instances}
    output_bindings: dict[str, list[dict]] = {t: [] for t in instances}

    def stream_param(descriptor: nbmp.IoDescriptor, stream_id: str) -> tuple[nbmp.StreamParameters, str]:
        for p in descriptor.media_parameters:
            if p.stream_id == stream_id:
                return p, "media"
        for p in descriptor.metadata_parameters:
            if p.stream_id == stream_id:
                return p, "metadata"
        raise UnresolvedConnection(f"stream {stream_id!r} is not declared")

    for c in wdd.processing.connection_map:
        from_task = c.from_.id in instances
        to_task = c.to.id in instances
        if from_task and to_task:
            mode = c.mode or nbmp.MODE_PUSH
            stream_id = _edge_stream_id(c)
            if mode == nbmp.MODE_PUSH:
                listener_url = str(TaskURL(wf_id, c.to.id, c.to.port_name))
            else:
                listener_url = str(TaskURL(wf_id, c.from_.id, c.from_.port_name))
            media = {"id": stream_id, "type": "media", "direction": mode, "url": listener_url}
            output_bindings[c.from_.id].append({"portName": c.from_.port_name, "media": dict(media)})
            input_bindings[c.to.id].append({"portName": c.to.port_name, "media": dict(media)})
        elif to_task:
            if c.from_.id not in input_ids:
                raise UnresolvedConnection(f"connection source {c.from_.id!r} is neither task nor input stream")
            params, media_type = stream_param(wdd.input, c.from_.id)
            mode = params.mode or nbmp.MODE_PUSH
            if mode == nbmp.MODE_PUSH:
                url = str(TaskURL(wf_id, c.to.id, c.to.port_name))
            else:
                url = params.caching_server_url
            input_bindings[c.to.id].append({"portName": c.to.port_name, "media": _stream_media(params, media_type, url)})
        elif from_task:
            if c.to.id not in output_ids:
                raise UnresolvedConnection(f"connection target {c.to.id!r} is neither task nor output stream")
            params, media_type = stream_param(wdd.output, c.to.id)
            mode = params.mode or nbmp.MODE_PUSH
            if mode == nbmp.MODE_PUSH:
                url = params.caching_server_url
            else:
                url = str(TaskURL(wf_id, c.from_.id, c.from_.port_name))
            output_bindings[c.from_.id].append({"portName": c.from_.port_name, "media": _stream_media(params, media_type, url)})
        else:
            raise UnresolvedConnection(f"connection {c.from_.id!r} -> {c.to.id!r} references no task")

    tasks = []
    for r in sorted(wdd.processing.function_restrictions, key=lambda r: r.instance):
        name = task_resource_name(wf_id, r.instance)
        annotations = {ANNOTATION_TASK_ID: r.instance}
        extra = {}
        if r.general_extra:
            extra["general-extra"] = r.general_extra
        if r.extra:
            extra["extra"] = r.extra
        if extra:
            annotations[ANNOTATION_TASK_EXTRA] = json.dumps(extra, sort_keys=True)
        task = model.new_resource(
            KIND_TASK,
            name,
            namespace,
            spec={
                "workflowRef": {"name": wf_name},
                "functionRef": {"name": r.function},
                "config": dict(r.config),
                "inputPortBindings": sorted(input_bindings[r.instance], key=lambda b: (b["portName"], b["media"]["id"])),
                "outputPortBindings": sorted(output_bindings[r.instance], key=lambda b: (b["portName"], b["media"]["id"])),
            },
            labels={LABEL_WORKFLOW: wf_name},
            annotations=annotations,
        )
        tasks.append(task)
    return workflow, tasks


_PHASE_TO_STATE = {
    "": nbmp.INSTANTIATED,
    model.WF_INITIALIZING: nbmp.INSTANTIATED,
    model.WF_RUNNING: nbmp.RUNNING,
    model.WF_AWAITING_COMPLETION: nbmp.RUNNING,
    model.WF_SUCCEEDED: nbmp.DESTROYED,
    model.WF_FAILED: nbmp.DESTROYED,
}


def workflow_state(workflow: dict) -> str:
    phase = (workflow.get("status") or {}).get("phase", "")
    return _PHASE_TO_STATE.get(phase, nbmp.INSTANTIATED)


def resources_to_wdd(workflow: dict, tasks: list[dict]) -> nbmp.Description:
    """Rebuild the WDD from stored resources; engine task URLs fold back into
    the connection map. Inconsistencies become acknowledge.failed entries."""
    annotations = workflow["metadata"].get("annotations") or {}
    wf_id = annotations.get(ANNOTATION_WORKFLOW_ID) or workflow["metadata"]["name"]
    baggage = json.loads(annotations.get(ANNOTATION_NBMP_IO) or "{}")

    description = nbmp.Description(document_kind=nbmp.WDD, general=nbmp.General(id=wf_id))
    human = (workflow.get("spec") or {}).get("humanReadable") or {}
    description.general.name = human.get("name", "")
    description.general.description = human.get("description", "")
    description.general.state = workflow_state(workflow)
    description.general.extra = dict(baggage.get("general-extra") or {})
    ports = baggage.get("general-ports") or {}
    description.general.input_ports = [nbmp.PortBinding.from_json(p, "general.input-ports") for p in ports.get("input-ports", [])]
    description.general.output_ports = [nbmp.PortBinding.from_json(p, "general.output-ports") for p in ports.get("output-ports", [])]
    if "input" in baggage:
        description.input = nbmp.IoDescriptor.from_json(baggage["input"], "input")
    if "output" in baggage:
        description.output = nbmp.IoDescriptor.from_json(baggage["output"], "output")
    if "requirement" in baggage:
        description.requirement = baggage["requirement"]
    if "reporting" in baggage:
        description.reporting = nbmp.Reporting.from_json(baggage["reporting"], "reporting")
    description.processing.extra = dict(baggage.get("processing-extra") or {})
    description.extra = dict(baggage.get("extra") or {})

    input_ids = {p.stream_id for p in description.input.all_parameters()}
    output_ids = {p.stream_id for p in description.output.all_parameters()}

    failures: list[str] = []
    restrictions = []
    edges: list[nbmp.Connection] = []
    for task in sorted(tasks, key=lambda t: t["metadata"]["name"]):
        t_annotations = task["metadata"].get("annotations") or {}
        instance = t_annotations.get(ANNOTATION_TASK_ID) or task["metadata"]["name"]
        t_extra = json.loads(t_annotations.get(ANNOTATION_TASK_EXTRA) or "{}")
        spec = task.get("spec") or {}
        restriction = nbmp.FunctionRestriction(
            instance=instance,
            function=(spec.get("functionRef") or {}).get("name", ""),
            config={k: v for k, v in (spec.get("config") or {}).items() if k != CONFIG_KEY_WORKFLOW_ID},
            general_extra=dict(t_extra.get("general-extra") or {}),
            extra=dict(t_extra.get("extra") or {}),
        )
        restrictions.append(restriction)
        phase = (task.get("status") or {}).get("phase", "")
        if phase == model.TASK_FAILED:
            failures.append(f"task {instance} failed")

        for binding in spec.get("outputPortBindings") or []:
            media = binding.get("media") or {}
            url = media.get("url", "")
            stream_id = media.get("id", "")
            port = binding.get("portName", "")
            if stream_id in output_ids:
                edges.append(nbmp.Connection(
                    from_=nbmp.ConnectionEnd(id=instance, port_name=port),
                    to=nbmp.ConnectionEnd(id=stream_id),
                ))
            elif media.get("direction") == nbmp.MODE_PUSH and is_engine_url(url):
                target = parse_engine_url(url)
                if isinstance(target, TaskURL):
                    edges.append(_rebuild_edge(stream_id, instance, port, target.task_id, target.port_name, ""))
        for binding in spec.get("inputPortBindings") or []:
            media = binding.get("media") or {}
            url = media.get("url", "")
            stream_id = media.get("id", "")
            port = binding.get("portName", "")
            if stream_id in input_ids:
                edges.append(nbmp.Connection(
                    from_=nbmp.ConnectionEnd(id=stream_id),
                    to=nbmp.ConnectionEnd(id=instance, port_name=port),
                ))
            elif media.get("direction") == nbmp.MODE_PULL and is_engine_url(url):
                source = parse_engine_url(url)
                if isinstance(source, TaskURL):
                    edges.append(_rebuild_edge(stream_id, source.task_id, source.port_name, instance, port, nbmp.MODE_PULL))

    description.processing.function_restrictions = sorted(restrictions, key=lambda r: r.instance)
    description.processing.connection_map = sorted(
        edges, key=lambda c: (c.from_.id, c.from_.port_name, c.to.id, c.to.port_name)
    )

    phase = (workflow.get("status") or {}).get("phase", "")
    if phase == model.WF_FAILED:
        failed_cond = model.get_condition(workflow.get("status") or {}, "Failed")
        if failed_cond and failed_cond.get("message"):
            failures.insert(0, failed_cond["message"])
        description.acknowledge = nbmp.make_acknowledge(nbmp.ACK_FAILED, failed=failures or ["workflow failed"])
    elif phase == model.WF_SUCCEEDED:
        description.acknowledge = nbmp.make_acknowledge(nbmp.ACK_OK)
    return description


def _rebuild_edge(stream_id: str, from_id: str, from_port: str, to_id: str, to_port: str, mode: str) -> nbmp.Connection:
    synthesized = f"{from_id}.{from_port}-{to_id}.{to_port}"
    return nbmp.Connection(
        from_=nbmp.ConnectionEnd(id=from_id, port_name=from_port),
        to=nbmp.ConnectionEnd(id=to_id, port_name=to_port),
        connection_id="" if stream_id == synthesized else stream_id,
        mode=mode,
    )


# -- helper data ------------------------------------------------------------------


@dataclass
class EventLogConnection:
    root: str
    subject: str


def build_helper_data(
    workflow: dict,
    task: dict,
    function: dict,
    task_template: dict | None = None,
    locate_media_location: Callable[[str], dict | None] | None = None,
    resolve_endpoint: Callable[[str], str | None] | None = None,
    event_log: EventLogConnection | None = None,
) -> dict:
    """Aggregate workflow, task and function fields into the helper data file.

    All engine URL schemes are resolved: media-location URLs via the located
    MediaLocation resources, task URLs via the service endpoint registry of
    the execution backend. The merged config is function defaultConfig,
    then task template config, then task config, later wins.
    """
    wf_annotations = workflow["metadata"].get("annotations") or {}
    wf_id = wf_annotations.get(ANNOTATION_WORKFLOW_ID) or workflow["metadata"]["name"]
    human = (workflow.get("spec") or {}).get("humanReadable") or {}

    config: dict[str, str] = {}
    config.update((function.get("spec") or {}).get("defaultConfig") or {})
    if task_template:
        config.update((task_template.get("spec") or {}).get("config") or {})
    config.update((task.get("spec") or {}).get("config") or {})
    config.setdefault(CONFIG_KEY_WORKFLOW_ID, wf_id)

    def resolve_url(url: str) -> str:
        if not url or not is_engine_url(url):
            return url
        parsed = parse_engine_url(url)
        if isinstance(parsed, MediaLocationURL):
            location = locate_media_location(parsed.location_name) if locate_media_location else None
            if location is None:
                raise UnknownMediaLocation(parsed.location_name)
            return resolve_media_location_url(location, parsed.path)
        assert isinstance(parsed, TaskURL)
        peer_name = task_resource_name(parsed.workflow_id, parsed.task_id)
        endpoint = resolve_endpoint(peer_name) if resolve_endpoint else None
        if endpoint is None:
            raise UnknownPeerTask(peer_name)
        return f"http://{endpoint}/{parsed.port_name}"

    def resolve_bindings(bindings: list[dict]) -> list[dict]:
        out = []
        for binding in bindings or []:
            media = dict(binding.get("media") or {})
            media["url"] = resolve_url(media.get("url", ""))
            resolved = dict(binding)
            resolved["media"] = media
            out.append(resolved)
        return out

    spec = task.get("spec") or {}
    data: dict[str, Any] = {
        "apiVersion": model.API_VERSION,
        "kind": HELPER_DATA_KIND,
        "workflow": {"id": wf_id, "name": human.get("name", "")},
        "task": {
            "id": task["metadata"]["name"],
            "inputPortBindings": resolve_bindings(spec.get("inputPortBindings")),
            "outputPortBindings": resolve_bindings(spec.get("outputPortBindings")),
            "config": config,
        },
    }
    if event_log:
        data["eventLog"] = {"root": event_log.root, "subject": event_log.subject}
    return data


def helper_data_urls(data: dict) -> list[str]:
    urls = []
    for field_name in ("inputPortBindings", "outputPortBindings"):
        for binding in data.get("task", {}).get(field_name) or []:
            url = (binding.get("media") or {}).get("url")
            if url:
                urls.append(url)
    return urls


def build_tdd(data: dict, report_url: str = "") -> nbmp.Description:
    """Render helper data as the TDD sent over the NBMP task API; a reporting
    descriptor pointing at the helper's report endpoint is attached."""
    task = data.get("task") or {}
    description = nbmp.Description(document_kind=nbmp.TDD, general=nbmp.General(id=task.get("id", "")))
    description.configuration = dict(task.get("config") or {})

    for field_name, io, ports in (
        ("inputPortBindings", description.input, description.general.input_ports),
        ("outputPortBindings", description.output, description.general.output_ports),
    ):
        for binding in task.get(field_name) or []:
            media = binding.get("media") or {}
            metadata = media.get("metadata") or {}
            params = nbmp.StreamParameters(
                stream_id=media.get("id", ""),
                protocol=_protocol_of(media.get("url", "")),
                mode=media.get("direction", nbmp.MODE_PUSH),
                mime_type=metadata.get("mimeType", ""),
                codec_type=metadata.get("codecType", ""),
                bitrate=metadata.get("bitRate"),
                caching_server_url=media.get("url", ""),
            )
            if media.get("type") == "metadata":
                io.metadata_parameters.append(params)
            else:
                io.media_parameters.append(params)
            ports.append(nbmp.PortBinding(port_name=binding.get("portName", ""), stream_id=media.get("id", "")))
    if report_url:
        description.reporting = nbmp.Reporting(url=report_url, report_type=REPORT_TYPE, delivery_method="HTTP_POST")
    return description


def _protocol_of(url: str) -> str:
    if url.startswith("buffered:"):
        return "buffered"
    if url.startswith("https:"):
        return "https"
    return "http"
