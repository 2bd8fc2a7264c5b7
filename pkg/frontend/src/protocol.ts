// Wire protocol: message shapes, validators, and command clamps.
// Mirrors the server's published wire schema; every displayed physical
// quantity originates from validated server messages.

export const V_CMD_MIN = 0;
export const V_CMD_MAX = 5;
export const DELTA_CMD_DEG_MAX = 10;

export const SCENARIOS = [
  "flat", "rough", "gravel", "slope", "steps",
  "max_noise", "dropouts", "low_speed", "normal_speed",
] as const;
export type ScenarioName = (typeof SCENARIOS)[number];

export const CONTROLLERS = ["policy", "pid", "lqr"] as const;
export type ControllerId = (typeof CONTROLLERS)[number];

export interface CommandMessage {
  type: "command";
  seq: number;
  v_cmd: number;
  delta_cmd_deg: number;
}

export interface ResetMessage {
  type: "reset";
  seq: number;
  scenario: ScenarioName;
}

export interface PauseMessage {
  type: "pause";
  seq: number;
}

export interface SelectControllerMessage {
  type: "select_controller";
  seq: number;
  id: ControllerId;
}

export interface LeaseMessage {
  type: "take_control" | "release_control";
  seq: number;
}

export type ClientMessage =
  | CommandMessage
  | ResetMessage
  | PauseMessage
  | SelectControllerMessage
  | LeaseMessage;

export interface RewardTerms {
  surv: number;
  vel: number;
  steer: number;
  act: number;
  rate: number;
}

export interface StateMessage {
  type: "state";
  t: number;
  phi: number;
  phi_dot: number;
  delta: number;
  v: number;
  psi: number;
  x: number;
  y: number;
  v_cmd?: number;
  delta_cmd_deg?: number;
  paused?: boolean;
  scenario?: string;
  replay?: boolean;
  reward_terms: RewardTerms;
  controller: string;
}

export type EventKind =
  | "fall" | "reset" | "timeout"
  | "lease_granted" | "lease_denied" | "lease_lost" | "lease_released";

export interface EventMessage {
  type: "event";
  kind: EventKind;
  detail?: string;
}

export interface AckMessage {
  type: "ack";
  seq: number;
  applied?: Record<string, unknown>;
  clamped?: boolean;
}

export interface ErrorMessage {
  type: "error";
  seq?: number | null;
  detail: string;
}

export type ServerMessage = StateMessage | EventMessage | AckMessage | ErrorMessage;

const EVENT_KINDS: readonly string[] = [
  "fall", "reset", "timeout",
  "lease_granted", "lease_denied", "lease_lost", "lease_released",
];

function isFiniteNumber(x: unknown): x is number {
  return typeof x === "number" && Number.isFinite(x);
}

export function clampCommand(vCmd: number, deltaCmdDeg: number): {
  v_cmd: number; delta_cmd_deg: number;
} {
  return {
    v_cmd: Math.min(Math.max(vCmd, V_CMD_MIN), V_CMD_MAX),
    delta_cmd_deg: Math.min(Math.max(deltaCmdDeg, -DELTA_CMD_DEG_MAX), DELTA_CMD_DEG_MAX),
  };
}

export function validateClientMessage(data: unknown): data is ClientMessage {
  if (typeof data !== "object" || data === null) return false;
  const m = data as Record<string, unknown>;
  if (!Number.isInteger(m.seq) || (m.seq as number) < 0) return false;
  switch (m.type) {
    case "command":
      return (
        isFiniteNumber(m.v_cmd) && isFiniteNumber(m.delta_cmd_deg) &&
        m.v_cmd >= V_CMD_MIN && m.v_cmd <= V_CMD_MAX &&
        Math.abs(m.delta_cmd_deg) <= DELTA_CMD_DEG_MAX
      );
    case "reset":
      return typeof m.scenario === "string" &&
        (SCENARIOS as readonly string[]).includes(m.scenario);
    case "select_controller":
      return typeof m.id === "string" &&
        (CONTROLLERS as readonly string[]).includes(m.id);
    case "pause":
    case "take_control":
    case "release_control":
      return true;
    default:
      return false;
  }
}

function validRewardTerms(x: unknown): x is RewardTerms {
  if (typeof x !== "object" || x === null) return false;
  const terms = x as Record<string, unknown>;
  return ["surv", "vel", "steer", "act", "rate"].every(
    (k) => isFiniteNumber(terms[k]),
  );
}

// Never throws; a malformed server frame yields null and is ignored upstream.
export function parseServerMessage(raw: unknown): ServerMessage | null {
  let data: unknown = raw;
  if (typeof raw === "string") {
    try {
      data = JSON.parse(raw);
    } catch {
      return null;
    }
  }
  if (typeof data !== "object" || data === null) return null;
  const m = data as Record<string, unknown>;
  switch (m.type) {
    case "state": {
      const numeric = ["t", "phi", "phi_dot", "delta", "v", "psi", "x", "y"];
      if (!numeric.every((k) => isFiniteNumber(m[k]))) return null;
      if (!validRewardTerms(m.reward_terms)) return null;
      if (typeof m.controller !== "string") return null;
      return m as unknown as StateMessage;
    }
    case "event":
      if (typeof m.kind !== "string" || !EVENT_KINDS.includes(m.kind)) return null;
      return m as unknown as EventMessage;
    case "ack":
      if (!Number.isInteger(m.seq)) return null;
      return m as unknown as AckMessage;
    case "error":
      if (typeof m.detail !== "string") return null;
      return m as unknown as ErrorMessage;
    default:
      return null;
  }
}
