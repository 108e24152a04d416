// Server-sent-events client over fetch with a resumable cursor. Implemented
// on ReadableStream rather than EventSource so the same code runs in the
// browser and under node-based tests, and so reconnects can resume from the
// last applied event id with no gaps or duplicates.

export interface SseEvent {
  id?: string;
  event?: string;
  data: string;
}

export function parseSseBuffer(buffer: string): { events: SseEvent[]; rest: string } {
  const events: SseEvent[] = [];
  const blocks = buffer.split("\n\n");
  const rest = blocks.pop() ?? "";
  for (const block of blocks) {
    if (!block.trim()) continue;
    const ev: SseEvent = { data: "" };
    const dataLines: string[] = [];
    for (const line of block.split("\n")) {
      if (line.startsWith("id:")) ev.id = line.slice(3).trim();
      else if (line.startsWith("event:")) ev.event = line.slice(6).trim();
      else if (line.startsWith("data:")) dataLines.push(line.slice(5).trimStart());
      // comment lines (":") and unknown fields are ignored per the SSE spec
    }
    ev.data = dataLines.join("\n");
    events.push(ev);
  }
  return { events, rest };
}

export interface StreamOptions {
  /** resume after this event id; -1 means from the beginning */
  cursor?: number;
  retryDelayMs?: number;
  fetchFn?: typeof fetch;
  onStatus?: (status: "connected" | "stale" | "closed") => void;
}

export class EventStreamClient {
  cursor: number;
  private closed = false;
  private controller: AbortController | null = null;
  private readonly retryDelayMs: number;
  private readonly fetchFn: typeof fetch;
  private readonly onStatus: (status: "connected" | "stale" | "closed") => void;

  constructor(
    private url: string,
    private onEvent: (ev: SseEvent) => void,
    opts: StreamOptions = {},
  ) {
    this.cursor = opts.cursor ?? -1;
    this.retryDelayMs = opts.retryDelayMs ?? 1000;
    this.fetchFn = opts.fetchFn ?? fetch;
    this.onStatus = opts.onStatus ?? (() => {});
  }

  close(): void {
    this.closed = true;
    this.controller?.abort(); // interrupt a read blocked on an idle connection
    this.onStatus("closed");
  }

  /** Run the connect/read/retry loop until close() is called. */
  async run(): Promise<void> {
    while (!this.closed) {
      try {
        await this.readOnce();
      } catch {
        if (!this.closed) this.onStatus("stale");
      }
      if (!this.closed) {
        await new Promise((resolve) => setTimeout(resolve, this.retryDelayMs));
      }
    }
  }

  /** One connection: read events until the server or caller closes. */
  async readOnce(): Promise<number> {
    const sep = this.url.includes("?") ? "&" : "?";
    this.controller = new AbortController();
    const res = await this.fetchFn(`${this.url}${sep}cursor=${this.cursor + 1}`, {
      signal: this.controller.signal,
    });
    if (!res.ok || !res.body) throw new Error(`stream failed: ${res.status}`);
    this.onStatus("connected");
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    let delivered = 0;
    try {
      while (!this.closed) {
        const { done, value } = await reader.read();
        if (done) break;
        buffer += decoder.decode(value, { stream: true });
        const { events, rest } = parseSseBuffer(buffer);
        buffer = rest;
        for (const ev of events) {
          const id = ev.id !== undefined ? Number(ev.id) : NaN;
          if (!Number.isNaN(id)) {
            if (id <= this.cursor) continue; // duplicate delivery
            this.cursor = id;
          }
          delivered += 1;
          this.onEvent(ev);
        }
      }
    } finally {
      await reader.cancel().catch(() => {});
      this.controller = null;
    }
    return delivered;
  }
}
