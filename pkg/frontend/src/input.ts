// Operator command input: keyboard ramps and slider set-points, debounced to
// the wire.  Pure state machine driven by tick(now) so it is testable without
// a DOM; key handlers just flip the held flags.

import { ClientMessage, clampCommand } from "./protocol.js";

export const STEER_RAMP_DEG_S = 5;   // arrow left/right ramp rate
export const SPEED_RAMP_MS_S = 1;    // arrow up/down ramp rate
export const MAX_SEND_HZ = 20;
export const ACK_WARN_AFTER_S = 1.0;

export interface KeyFlags {
  left: boolean;
  right: boolean;
  up: boolean;
  down: boolean;
}

export class CommandInput {
  vCmd = 2.0;
  deltaCmdDeg = 0.0;
  keys: KeyFlags = { left: false, right: false, up: false, down: false };
  enabled = false;  // command authority held
  private seq = 0;
  private lastSent = { v: NaN, d: NaN };
  private lastSendTime = -Infinity;
  private lastTick: number | null = null;
  private pending: Array<{ seq: number; at: number }> = [];

  keyDown(key: string): void {
    if (key === "ArrowLeft") this.keys.left = true;
    else if (key === "ArrowRight") this.keys.right = true;
    else if (key === "ArrowUp") this.keys.up = true;
    else if (key === "ArrowDown") this.keys.down = true;
  }

  keyUp(key: string): void {
    if (key === "ArrowLeft") this.keys.left = false;
    else if (key === "ArrowRight") this.keys.right = false;
    else if (key === "ArrowUp") this.keys.up = false;
    else if (key === "ArrowDown") this.keys.down = false;
  }

  setSliders(vCmd: number, deltaCmdDeg: number): void {
    const c = clampCommand(vCmd, deltaCmdDeg);
    this.vCmd = c.v_cmd;
    this.deltaCmdDeg = c.delta_cmd_deg;
  }

  setEnabled(enabled: boolean): void {
    this.enabled = enabled;
    if (!enabled) {
      this.keys = { left: false, right: false, up: false, down: false };
      this.pending = [];
    }
  }

  ackReceived(seq: number): void {
    this.pending = this.pending.filter((p) => p.seq > seq);
  }

  hasUnackedWarning(now: number): boolean {
    return this.pending.some((p) => now - p.at > ACK_WARN_AFTER_S);
  }

  /** Advance ramps and emit at most one debounced command message. */
  tick(now: number): ClientMessage | null {
    const dt = this.lastTick === null ? 0 : Math.max(now - this.lastTick, 0);
    this.lastTick = now;
    if (!this.enabled) return null;

    const steerDir = (this.keys.right ? 1 : 0) - (this.keys.left ? 1 : 0);
    const speedDir = (this.keys.up ? 1 : 0) - (this.keys.down ? 1 : 0);
    if (steerDir !== 0 || speedDir !== 0) {
      const c = clampCommand(
        this.vCmd + speedDir * SPEED_RAMP_MS_S * dt,
        this.deltaCmdDeg + steerDir * STEER_RAMP_DEG_S * dt,
      );
      this.vCmd = c.v_cmd;
      this.deltaCmdDeg = c.delta_cmd_deg;
    }

    const changed = this.vCmd !== this.lastSent.v ||
      this.deltaCmdDeg !== this.lastSent.d;
    if (!changed || now - this.lastSendTime < 1 / MAX_SEND_HZ) return null;

    this.seq += 1;
    this.lastSent = { v: this.vCmd, d: this.deltaCmdDeg };
    this.lastSendTime = now;
    this.pending.push({ seq: this.seq, at: now });
    if (this.pending.length > 64) this.pending.shift();
    return {
      type: "command",
      seq: this.seq,
      v_cmd: this.vCmd,
      delta_cmd_deg: this.deltaCmdDeg,
    };
  }

  nextSeq(): number {
    this.seq += 1;
    return this.seq;
  }
}
