/**
 * Drives the engine's script host through its external interfaces: a TDD file
 * is rendered for the fixture and the script-lua function is spawned via the
 * multi-call functions binary. Log lines are collected from the process
 * output for fixture assertions.
 */

import { spawn } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import * as path from "node:path";

const PYTHON = process.env.NME_PYTHON ?? "python3";

export interface StreamBinding {
  portName: string;
  streamId: string;
  url: string;
  mode: "push" | "pull";
  kind: "media" | "metadata";
}

export interface ScriptRunResult {
  exitCode: number;
  logLines: string[];
  rawOutput: string;
}

export function loadFixture(name: string): string {
  const scriptPath = path.join(path.dirname(new URL(import.meta.url).pathname), "..", "scripts", name);
  return readFileSync(scriptPath, "utf-8");
}

export async function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = createServer();
    server.listen(0, "127.0.0.1", () => {
      const port = (server.address() as { port: number }).port;
      server.close(() => resolve(port));
    });
    server.on("error", reject);
  });
}

export function buildTdd(options: {
  taskId: string;
  script: string;
  config?: Record<string, string>;
  inputs?: StreamBinding[];
  outputs?: StreamBinding[];
}): Record<string, unknown> {
  const parameters = [{ name: "script", values: [options.script] }];
  for (const [key, value] of Object.entries(options.config ?? {})) {
    parameters.push({ name: key, values: [value] });
  }
  const tdd: Record<string, any> = {
    general: { id: options.taskId },
    configuration: { parameters },
  };
  const attach = (bindings: StreamBinding[] | undefined, section: "input" | "output", portsKey: string) => {
    if (!bindings || bindings.length === 0) return;
    tdd[section] = { "media-parameters": [], "metadata-parameters": [] };
    tdd.general[portsKey] = [];
    for (const binding of bindings) {
      const params = {
        "stream-id": binding.streamId,
        protocol: "http",
        mode: binding.mode,
        "caching-server-url": binding.url,
      };
      const list = binding.kind === "metadata" ? "metadata-parameters" : "media-parameters";
      tdd[section][list].push(params);
      tdd.general[portsKey].push({ "port-name": binding.portName, bind: { "stream-id": binding.streamId } });
    }
  };
  attach(options.inputs, "input", "input-ports");
  attach(options.outputs, "output", "output-ports");
  return tdd;
}

export async function runScriptTask(
  tdd: Record<string, unknown>,
  timeoutMs = 30000,
): Promise<ScriptRunResult> {
  const dir = mkdtempSync(path.join(tmpdir(), "nme-script-"));
  const tddPath = path.join(dir, "tdd.json");
  writeFileSync(tddPath, JSON.stringify(tdd));
  const child = spawn(PYTHON, ["-m", "mediaengine.cli", "functions", "script-lua", tddPath], {
    stdio: ["ignore", "pipe", "pipe"],
    env: { ...process.env, NME_LOG_LEVEL: "INFO" },
  });
  let output = "";
  child.stdout.on("data", (chunk) => (output += chunk.toString()));
  child.stderr.on("data", (chunk) => (output += chunk.toString()));
  const exitCode: number = await new Promise((resolve, reject) => {
    const timer = setTimeout(() => {
      child.kill("SIGKILL");
      reject(new Error(`script task timed out after ${timeoutMs}ms; output so far:\n${output}`));
    }, timeoutMs);
    child.on("exit", (code) => {
      clearTimeout(timer);
      resolve(code ?? 1);
    });
    child.on("error", (err) => {
      clearTimeout(timer);
      reject(err);
    });
  });
  const logLines = output
    .split("\n")
    .filter((line) => line.includes("script: "))
    .map((line) => line.slice(line.indexOf("script: ") + "script: ".length).trimEnd());
  return { exitCode, logLines, rawOutput: output };
}

export async function postToPort(url: string, body: string | Uint8Array): Promise<void> {
  // the script's input-push port may still be binding; retry briefly
  const deadline = Date.now() + 10000;
  let lastError: unknown = null;
  const payload: BodyInit = typeof body === "string" ? body : new Uint8Array(body);
  while (Date.now() < deadline) {
    try {
      const response = await fetch(url, { method: "POST", body: payload });
      if (response.ok) return;
      lastError = new Error(`port answered ${response.status}`);
    } catch (err) {
      lastError = err;
    }
    await new Promise((resolve) => setTimeout(resolve, 100));
  }
  throw lastError;
}
