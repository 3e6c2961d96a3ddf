/**
 * Recording NBMP workflow API: serves a canned WDD on GET and echoes PATCH
 * bodies back, recording every interaction for trace assertions.
 */

import * as http from "node:http";
import { AddressInfo } from "node:net";

export interface RecordedRequest {
  method: string;
  path: string;
  body: unknown;
}

export class RecordingGateway {
  readonly trace: RecordedRequest[] = [];
  private server: http.Server;
  private wdd: Record<string, unknown>;

  constructor(wdd: Record<string, unknown>) {
    this.wdd = wdd;
    this.server = http.createServer((req, res) => this.handle(req, res));
  }

  private handle(req: http.IncomingMessage, res: http.ServerResponse): void {
    const chunks: Buffer[] = [];
    req.on("data", (chunk) => chunks.push(chunk));
    req.on("end", () => {
      const raw = Buffer.concat(chunks).toString("utf-8");
      const body = raw ? JSON.parse(raw) : null;
      this.trace.push({ method: req.method ?? "", path: req.url ?? "", body });
      if (req.method === "GET") {
        res.writeHead(200, { "Content-Type": "application/json" });
        res.end(JSON.stringify(this.wdd));
        return;
      }
      if (req.method === "PATCH" || req.method === "PUT") {
        this.wdd = body as Record<string, unknown>;
        res.writeHead(200, { "Content-Type": "application/json" });
        res.end(JSON.stringify(body));
        return;
      }
      res.writeHead(405);
      res.end();
    });
  }

  async start(): Promise<string> {
    await new Promise<void>((resolve) => this.server.listen(0, "127.0.0.1", resolve));
    const address = this.server.address() as AddressInfo;
    return `http://127.0.0.1:${address.port}/v2/workflows`;
  }

  async stop(): Promise<void> {
    await new Promise<void>((resolve) => this.server.close(() => resolve()));
  }

  patches(): RecordedRequest[] {
    return this.trace.filter((r) => r.method === "PATCH");
  }

  gets(): RecordedRequest[] {
    return this.trace.filter((r) => r.method === "GET");
  }
}

/** A byte sink accepting POSTs, for script output ports. */
export class PortSink {
  readonly received: Buffer[] = [];
  private server: http.Server;
  private waiters: (() => void)[] = [];

  constructor(private path: string = "/out") {
    this.server = http.createServer((req, res) => {
      const chunks: Buffer[] = [];
      req.on("data", (chunk) => chunks.push(chunk));
      req.on("end", () => {
        this.received.push(Buffer.concat(chunks));
        res.writeHead(200);
        res.end("ok");
        for (const waiter of this.waiters.splice(0)) waiter();
      });
    });
  }

  async start(): Promise<string> {
    await new Promise<void>((resolve) => this.server.listen(0, "127.0.0.1", resolve));
    const address = this.server.address() as AddressInfo;
    return `http://127.0.0.1:${address.port}${this.path}`;
  }

  async stop(): Promise<void> {
    await new Promise<void>((resolve) => this.server.close(() => resolve()));
  }

  async waitForPost(timeoutMs = 10000): Promise<Buffer> {
    if (this.received.length > 0) return this.received[0];
    await new Promise<void>((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("no POST arrived at the port sink")), timeoutMs);
      this.waiters.push(() => {
        clearTimeout(timer);
        resolve();
      });
    });
    return this.received[0];
  }
}
