// Session store: connection status, command authority, the latest state, and
// 30-second rolling buffers for the strip charts.  Socket callbacks are the
// only writers; rendering reads a consistent snapshot per frame.

import {
  AckMessage,
  EventMessage,
  ServerMessage,
  StateMessage,
} from "./protocol.js";

export const BUFFER_SECONDS = 30;
export const STALE_AFTER_S = 0.5;

export interface Sample {
  t: number;          // sim time, s
  phi: number;
  v: number;
  vCmd: number;
  delta: number;
  deltaCmdDeg: number;
}

export interface TrackPoint {
  x: number;
  y: number;
  psi: number;
}

export interface LogEntry {
  wall: number;
  kind: string;
  detail: string;
}

export type ConnectionStatus = "connecting" | "open" | "closed";

export class SessionStore {
  status: ConnectionStatus = "connecting";
  hasAuthority = false;
  latest: StateMessage | null = null;
  lastStateWall = -Infinity;   // wall-clock seconds of the last state frame
  samples: Sample[] = [];
  track: TrackPoint[] = [];
  eventLog: LogEntry[] = [];
  lastAckSeq = -1;
  lastAppliedCommand: { v_cmd?: number; delta_cmd_deg?: number } | null = null;
  clampedByServer = false;
  errors = 0;

  constructor(private now: () => number = () => Date.now() / 1000) {}

  setStatus(status: ConnectionStatus): void {
    this.status = status;
    if (status !== "open") this.hasAuthority = false;
  }

  // Returns true when the frame was consumed (valid and relevant).
  apply(msg: ServerMessage): boolean {
    switch (msg.type) {
      case "state":
        return this.applyState(msg);
      case "event":
        return this.applyEvent(msg);
      case "ack":
        return this.applyAck(msg);
      case "error":
        this.errors += 1;
        this.log("error", msg.detail);
        return true;
    }
  }

  private applyState(msg: StateMessage): boolean {
    // Time-ordered buffers: drop frames that jump backwards (fresh episode
    // resets legitimately restart t, so clear instead of rejecting).
    if (this.latest !== null && msg.t < this.latest.t) {
      this.samples = [];
      this.track = [];
    }
    this.latest = msg;
    this.lastStateWall = this.now();
    this.samples.push({
      t: msg.t,
      phi: msg.phi,
      v: msg.v,
      vCmd: msg.v_cmd ?? NaN,
      delta: msg.delta,
      deltaCmdDeg: msg.delta_cmd_deg ?? NaN,
    });
    this.track.push({ x: msg.x, y: msg.y, psi: msg.psi });
    const cutoff = msg.t - BUFFER_SECONDS;
    while (this.samples.length && this.samples[0].t < cutoff) this.samples.shift();
    while (this.track.length > 3000) this.track.shift();
    return true;
  }

  private applyEvent(msg: EventMessage): boolean {
    switch (msg.kind) {
      case "lease_granted":
        this.hasAuthority = true;
        break;
      case "lease_lost":
      case "lease_released":
      case "lease_denied":
        this.hasAuthority = false;
        break;
      case "reset":
        this.samples = [];
        this.track = [];
        break;
    }
    this.log(msg.kind, msg.detail ?? "");
    return true;
  }

  private applyAck(msg: AckMessage): boolean {
    this.lastAckSeq = Math.max(this.lastAckSeq, msg.seq);
    if (msg.applied && ("v_cmd" in msg.applied || "delta_cmd_deg" in msg.applied)) {
      this.lastAppliedCommand = msg.applied as {
        v_cmd?: number; delta_cmd_deg?: number;
      };
      this.clampedByServer = Boolean(msg.clamped);
    }
    return true;
  }

  log(kind: string, detail: string): void {
    this.eventLog.push({ wall: this.now(), kind, detail });
    if (this.eventLog.length > 200) this.eventLog.shift();
  }

  isStale(): boolean {
    return this.status !== "open" ||
      this.now() - this.lastStateWall > STALE_AFTER_S;
  }
}
