// Websocket client with reconnect; the socket factory is injectable so tests
// can drive the store with a fake transport.

import { ClientMessage, parseServerMessage } from "./protocol.js";
import { SessionStore } from "./store.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export const RECONNECT_DELAY_MS = 1000;

export class SocketClient {
  private socket: SocketLike | null = null;
  private closedByUser = false;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private url: string,
    private store: SessionStore,
    private factory: SocketFactory,
    private onMessage?: (msg: ReturnType<typeof parseServerMessage>) => void,
  ) {}

  connect(): void {
    this.closedByUser = false;
    this.store.setStatus("connecting");
    const sock = this.factory(this.url);
    this.socket = sock;
    sock.onopen = () => this.store.setStatus("open");
    sock.onclose = () => {
      this.store.setStatus("closed");
      this.socket = null;
      if (!this.closedByUser) {
        this.reconnectTimer = setTimeout(() => this.connect(), RECONNECT_DELAY_MS);
      }
    };
    sock.onmessage = (ev) => {
      const msg = parseServerMessage(ev.data);
      if (msg === null) return; // malformed frames are dropped, never thrown
      this.store.apply(msg);
      this.onMessage?.(msg);
    };
  }

  send(msg: ClientMessage): boolean {
    if (this.socket === null || this.store.status !== "open") return false;
    try {
      this.socket.send(JSON.stringify(msg));
      return true;
    } catch {
      return false;
    }
  }

  close(): void {
    this.closedByUser = true;
    if (this.reconnectTimer !== null) clearTimeout(this.reconnectTimer);
    this.socket?.close();
  }
}

export function defaultUrl(loc: { protocol: string; host: string }): string {
  const scheme = loc.protocol === "https:" ? "wss:" : "ws:";
  return `${scheme}//${loc.host}/ws`;
}
