/**
 * Scale-by-demand adaptation scenario: the fixture must produce exactly the
 * expected GET/PATCH trace against a recording gateway, and the WDD diff must
 * match the scripted add/remove_connection calls.
 */

import { describe, expect, it } from "vitest";

import { buildTdd, freePort, loadFixture, postToPort, runScriptTask } from "../src/harness";
import { RecordingGateway } from "../src/recorder";

const WORKFLOW_ID = "wf-adapt";

function cannedWdd(): Record<string, unknown> {
  return {
    general: { id: WORKFLOW_ID, state: "running" },
    processing: {
      "connection-map": [],
      "function-restrictions": [
        { instance: "splitter", general: { id: "data-copy" } },
        { instance: "encoder-hd", general: { id: "media-encode" } },
        { instance: "monitor", general: { id: "script-lua" } },
      ],
    },
  };
}

const HD_EDGE = {
  from: { id: "splitter", "port-name": "out-hd" },
  to: { id: "encoder-hd", "port-name": "in" },
};

interface Wdd {
  processing?: { "connection-map"?: Array<typeof HD_EDGE> };
}

function edges(body: unknown): Array<typeof HD_EDGE> {
  return ((body as Wdd).processing?.["connection-map"] ?? []).map((c) => ({
    from: { id: c.from.id, "port-name": c.from["port-name"] },
    to: { id: c.to.id, "port-name": c.to["port-name"] },
  }));
}

async function runScenario(demandSignal: string) {
  const gateway = new RecordingGateway(cannedWdd());
  const apiUrl = await gateway.start();
  const demandPort = await freePort();
  const demandUrl = `http://127.0.0.1:${demandPort}/demand`;
  const tdd = buildTdd({
    taskId: "monitor-instance",
    script: loadFixture("scale-by-demand.lua"),
    config: {
      workflowAPIURL: apiUrl,
      "nme-workflow-id": WORKFLOW_ID,
    },
    inputs: [{ portName: "demand", streamId: "demand", url: demandUrl, mode: "push", kind: "metadata" }],
  });
  const running = runScriptTask(tdd);
  await postToPort(demandUrl, demandSignal);
  const result = await running;
  await gateway.stop();
  return { gateway, result };
}

describe("scale-by-demand fixture", () => {
  it("high then low demand produces exactly one GET and two PATCHes", async () => {
    const { gateway, result } = await runScenario("high\nlow\n");
    expect(result.exitCode, result.rawOutput).toBe(0);
    expect(result.logLines).toEqual(["scaled up", "scaled down", "adaptation done"]);

    const methods = gateway.trace.map((r) => r.method);
    expect(methods).toEqual(["GET", "PATCH", "PATCH"]);
    expect(gateway.gets()[0].path).toBe(`/v2/workflows/${WORKFLOW_ID}`);

    // WDD diff: the first update added the HD edge, the second removed it
    const [up, down] = gateway.patches();
    expect(edges(up.body)).toEqual([HD_EDGE]);
    expect(edges(down.body)).toEqual([]);
  });

  it("no demand events produce no PATCH, only the self retrieval GET", async () => {
    const { gateway, result } = await runScenario("");
    expect(result.exitCode, result.rawOutput).toBe(0);
    expect(result.logLines).toEqual(["adaptation done"]);
    expect(gateway.trace.map((r) => r.method)).toEqual(["GET"]);
  });

  it("a run against the same inputs is deterministic", async () => {
    const first = await runScenario("high\nlow\n");
    const second = await runScenario("high\nlow\n");
    expect(first.gateway.trace).toEqual(second.gateway.trace);
    expect(first.result.logLines).toEqual(second.result.logLines);
  });
});
