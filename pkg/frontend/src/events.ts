// Incremental parser for the service's SSE-style line protocol:
// "event: <kind>\n" "data: <json>\n" blank-line delimited, ": comments".

import type { ServiceEvent } from "./types.js";

export class SseParser {
  private buffer = "";

  /** Feed a raw chunk; returns the complete events it closed. */
  feed(chunk: string): ServiceEvent[] {
    this.buffer += chunk;
    const events: ServiceEvent[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) >= 0) {
      const block = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      const ev = parseBlock(block);
      if (ev) events.push(ev);
    }
    return events;
  }
}

function parseBlock(block: string): ServiceEvent | null {
  let data: string | null = null;
  for (const line of block.split("\n")) {
    if (line.startsWith(":")) continue; // heartbeat comment
    if (line.startsWith("data: ")) data = line.slice(6);
  }
  if (data === null) return null;
  return JSON.parse(data) as ServiceEvent;
}
