"""Random valid-WDD generator shared by model and conversion tests."""

from __future__ import annotations

import random

FUNCTION_NAMES = ["generic-noop", "generic-sleep", "data-discard", "data-copy", "media-encode"]


def make_random_wdd(rng: random.Random, wf_id: str | None = None) -> dict:
    """A structurally valid WDD: unique stream ids and task instances, edges
    only forward (acyclic by construction), every referenced stream declared."""
    wf_id = wf_id or f"wf-{rng.randrange(100000)}"
    n_tasks = rng.randint(1, 5)
    tasks = [f"task-{i}" for i in range(n_tasks)]
    n_inputs = rng.randint(0, 2)
    n_outputs = rng.randint(0, 2)

    def stream(idx: int, prefix: str) -> dict:
        s: dict = {"stream-id": f"{prefix}-{idx}", "protocol": "http"}
        if rng.random() < 0.7:
            s["mode"] = rng.choice(["push", "pull"])
        if rng.random() < 0.5:
            s["mime-type"] = rng.choice(["video/mp2t", "application/json"])
        if rng.random() < 0.3:
            s["bitrate"] = rng.randrange(1, 10_000_000)
        if s.get("mode") == "pull" or rng.random() < 0.6:
            s["caching-server-url"] = f"https://media.example/{prefix}/{idx}.ts"
        return s

    input_streams = [stream(i, "in") for i in range(n_inputs)]
    output_streams = [stream(i, "out") for i in range(n_outputs)]

    connections = []
    # forward task-to-task edges
    for i in range(n_tasks - 1):
        if rng.random() < 0.8:
            j = rng.randrange(i + 1, n_tasks)
            connections.append({
                "connection-id": f"c-{i}-{j}",
                "from": {"id": tasks[i], "port-name": "out"},
                "to": {"id": tasks[j], "port-name": "in"},
            })
    # workflow input/output bindings
    for k, s in enumerate(input_streams):
        connections.append({
            "from": {"id": s["stream-id"]},
            "to": {"id": tasks[k % n_tasks], "port-name": f"in-src-{k}"},
        })
    for k, s in enumerate(output_streams):
        connections.append({
            "from": {"id": tasks[k % n_tasks], "port-name": f"out-sink-{k}"},
            "to": {"id": s["stream-id"]},
        })

    restrictions = []
    for t in tasks:
        entry: dict = {"instance": t, "general": {"id": rng.choice(FUNCTION_NAMES)}}
        if rng.random() < 0.6:
            entry["configuration"] = {
                "parameters": [
                    {"name": f"k{j}", "values": [f"v{rng.randrange(10)}"]} for j in range(rng.randint(1, 3))
                ]
            }
        restrictions.append(entry)

    wdd: dict = {
        "general": {"id": wf_id},
        "processing": {
            "connection-map": connections,
            "function-restrictions": restrictions,
        },
    }
    if rng.random() < 0.5:
        wdd["general"]["name"] = f"Workflow {wf_id}"
    if rng.random() < 0.3:
        wdd["general"]["description"] = "generated"
    if input_streams:
        wdd["input"] = {"media-parameters": input_streams}
    if output_streams:
        wdd["output"] = {"media-parameters": output_streams}
    return wdd
