import { describe, expect, it, vi } from "vitest";

import { SocketClient, SocketLike, defaultUrl } from "../src/socket.js";
import { SessionStore } from "../src/store.js";

class FakeSocket implements SocketLike {
  static instances: FakeSocket[] = [];
  sent: string[] = [];
  onopen: ((ev?: unknown) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;

  constructor(public url: string) {
    FakeSocket.instances.push(this);
  }

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.onclose?.();
  }

  open(): void {
    this.onopen?.();
  }

  push(data: unknown): void {
    this.onmessage?.({ data });
  }
}

const stateFrame = JSON.stringify({
  type: "state", t: 0.1, phi: 0.02, phi_dot: 0, delta: 0, v: 2, psi: 0,
  x: 0, y: 0, reward_terms: { surv: 1, vel: 1, steer: 1, act: 0, rate: 0 },
  controller: "pid",
});

describe("socket client", () => {
  it("builds ws/wss urls from the page location", () => {
    expect(defaultUrl({ protocol: "http:", host: "localhost:8000" }))
      .toBe("ws://localhost:8000/ws");
    expect(defaultUrl({ protocol: "https:", host: "bike.example" }))
      .toBe("wss://bike.example/ws");
  });

  it("feeds valid frames to the store and drops malformed ones", () => {
    FakeSocket.instances = [];
    const store = new SessionStore(() => 0);
    const client = new SocketClient("ws://x/ws", store, (u) => new FakeSocket(u));
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    expect(store.status).toBe("open");
    sock.push(stateFrame);
    expect(store.latest?.phi).toBeCloseTo(0.02);
    for (const junk of ["{", "nope", JSON.stringify({ type: "state" })]) {
      expect(() => sock.push(junk)).not.toThrow();
    }
    expect(store.samples.length).toBe(1); // junk did not land
    client.close();
  });

  it("reconnects after an unexpected close and resumes streaming", () => {
    vi.useFakeTimers();
    FakeSocket.instances = [];
    const store = new SessionStore(() => 0);
    const client = new SocketClient("ws://x/ws", store, (u) => new FakeSocket(u));
    client.connect();
    FakeSocket.instances[0].open();
    FakeSocket.instances[0].close(); // dropped by the network
    expect(store.status).toBe("closed");
    vi.advanceTimersByTime(1100);
    expect(FakeSocket.instances.length).toBe(2); // second connection attempt
    FakeSocket.instances[1].open();
    FakeSocket.instances[1].push(stateFrame);
    expect(store.status).toBe("open");
    expect(store.latest?.t).toBeCloseTo(0.1);
    client.close();
    vi.advanceTimersByTime(5000);
    expect(FakeSocket.instances.length).toBe(2); // user close: no reconnect
    vi.useRealTimers();
  });

  it("refuses to send while the socket is not open", () => {
    FakeSocket.instances = [];
    const store = new SessionStore(() => 0);
    const client = new SocketClient("ws://x/ws", store, (u) => new FakeSocket(u));
    client.connect();
    expect(client.send({ type: "pause", seq: 1 })).toBe(false);
    FakeSocket.instances[0].open();
    expect(client.send({ type: "pause", seq: 2 })).toBe(true);
    expect(FakeSocket.instances[0].sent.length).toBe(1);
  });

  it("command to rendered ack round trip stays under 200 ms on loopback", async () => {
    FakeSocket.instances = [];
    const store = new SessionStore();
    const client = new SocketClient("ws://x/ws", store, (u) => {
      const sock = new FakeSocket(u);
      // loopback: every command frame is acked on the next macrotask
      const realSend = sock.send.bind(sock);
      sock.send = (data: string) => {
        realSend(data);
        const msg = JSON.parse(data) as { type: string; seq: number };
        if (msg.type === "command") {
          setTimeout(() => sock.push(JSON.stringify({
            type: "ack", seq: msg.seq,
            applied: { v_cmd: 2, delta_cmd_deg: 0 }, clamped: false,
          })), 0);
        }
      };
      return sock;
    });
    client.connect();
    FakeSocket.instances[0].open();
    const t0 = performance.now();
    client.send({ type: "command", seq: 41, v_cmd: 2, delta_cmd_deg: 0 });
    await new Promise((resolve) => setTimeout(resolve, 0));
    // the ack has landed in the store, i.e. it is renderable
    expect(store.lastAckSeq).toBe(41);
    expect(store.lastAppliedCommand).toEqual({ v_cmd: 2, delta_cmd_deg: 0 });
    expect(performance.now() - t0).toBeLessThan(200);
    client.close();
  });
});
