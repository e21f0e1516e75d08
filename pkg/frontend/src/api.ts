// Service client: REST calls plus the resumable event subscription.
// fetch is injectable so tests can script the service side.

import { SseParser } from "./events.js";
import type { LineState, ServiceEvent, Side } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface PatchReply {
  ok?: boolean;
  config?: Record<string, unknown>;
  effective_tick?: number;
  error?: { code: string; message: string };
}

export class ApiClient {
  constructor(public baseUrl: string, private fetchImpl: FetchLike = fetch.bind(globalThis)) {}

  async getState(): Promise<LineState> {
    const resp = await this.fetchImpl(`${this.baseUrl}/line/state`);
    if (!resp.ok) throw new Error(`state fetch failed: ${resp.status}`);
    return (await resp.json()) as LineState;
  }

  async start(): Promise<void> {
    await this.fetchImpl(`${this.baseUrl}/line/start`, { method: "POST" });
  }

  async stop(): Promise<void> {
    await this.fetchImpl(`${this.baseUrl}/line/stop`, { method: "POST" });
  }

  async patchThreshold(side: Side, body: Record<string, unknown>): Promise<PatchReply> {
    const resp = await this.fetchImpl(`${this.baseUrl}/stations/${side}/config`, {
      method: "PATCH",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    return (await resp.json()) as PatchReply;
  }

  async getRecords(params: Record<string, string | number> = {}): Promise<Record<string, unknown>> {
    const q = new URLSearchParams(Object.entries(params).map(([k, v]) => [k, String(v)]));
    const resp = await this.fetchImpl(`${this.baseUrl}/records?${q}`);
    return (await resp.json()) as Record<string, unknown>;
  }

  async getMetrics(): Promise<Record<string, unknown>> {
    const resp = await this.fetchImpl(`${this.baseUrl}/metrics`);
    return (await resp.json()) as Record<string, unknown>;
  }

  async getStationImage(side: Side): Promise<Uint8Array> {
    const resp = await this.fetchImpl(`${this.baseUrl}/stations/${side}/image`);
    if (!resp.ok) throw new Error(`no image for ${side}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  /** Stream /events from sinceSeq; onEvent per event until the body ends. */
  async streamEvents(sinceSeq: number, onEvent: (ev: ServiceEvent) => void,
                     signal?: AbortSignal): Promise<void> {
    const resp = await this.fetchImpl(`${this.baseUrl}/events?since_seq=${sinceSeq}`,
                                      { signal });
    if (!resp.ok || !resp.body) throw new Error(`event stream failed: ${resp.status}`);
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const ev of parser.feed(decoder.decode(value, { stream: true }))) {
        onEvent(ev);
      }
    }
  }
}

export interface SessionCallbacks {
  onState: (state: LineState) => void;
  onEvent: (ev: ServiceEvent) => void;
  onDisconnect: (message: string) => void;
}

/** Connect with resume: snapshot first, then events from the snapshot's
 * cursor; on stream loss reconnect with the latest cursor and backoff. */
export async function runSession(client: ApiClient, callbacks: SessionCallbacks,
                                 opts: { maxRetries?: number; backoffMs?: number } = {}):
    Promise<void> {
  const maxRetries = opts.maxRetries ?? Infinity;
  const backoffMs = opts.backoffMs ?? 1000;
  let cursor = -1;
  let attempt = 0;
  for (;;) {
    try {
      const state = await client.getState();
      callbacks.onState(state);
      cursor = state.event_seq;
      attempt = 0;
      await client.streamEvents(cursor + 1, (ev) => {
        cursor = Math.max(cursor, ev.seq);
        callbacks.onEvent(ev);
      });
      callbacks.onDisconnect("event stream ended");
    } catch (err) {
      callbacks.onDisconnect(String(err));
    }
    attempt += 1;
    if (attempt > maxRetries) return;
    await new Promise((r) => setTimeout(r, backoffMs * Math.min(attempt, 8)));
  }
}
