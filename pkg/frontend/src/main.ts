// Dashboard bootstrap: wire the socket, store, input machine, and canvases.

import { drawRewardBars, drawRollGauge, drawStrip, drawTrack } from "./charts.js";
import { CommandInput } from "./input.js";
import {
  CONTROLLERS,
  SCENARIOS,
  ScenarioName,
  ControllerId,
} from "./protocol.js";
import { SocketClient, defaultUrl } from "./socket.js";
import { SessionStore } from "./store.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

const store = new SessionStore();
const input = new CommandInput();
let resetInFlight = false;

const client = new SocketClient(
  defaultUrl(window.location),
  store,
  (url) => new WebSocket(url) as unknown as import("./socket.js").SocketLike,
  (msg) => {
    if (msg && msg.type === "ack") {
      input.ackReceived(msg.seq);
      if (msg.applied && "scenario" in (msg.applied ?? {})) resetInFlight = false;
      if (msg.applied && "v_cmd" in (msg.applied ?? {})) {
        // show the server-side command actually in force
        const applied = msg.applied as { v_cmd: number; delta_cmd_deg: number };
        vSlider.value = String(applied.v_cmd);
        dSlider.value = String(applied.delta_cmd_deg);
      }
    }
    if (msg && msg.type === "error") resetInFlight = false;
    if (msg && msg.type === "event") {
      input.setEnabled(store.hasAuthority);
      takeBtn.textContent = store.hasAuthority ? "release control" : "take control";
    }
  },
);

const gauge = byId<HTMLCanvasElement>("gauge");
const trackCanvas = byId<HTMLCanvasElement>("track");
const vStrip = byId<HTMLCanvasElement>("v-strip");
const dStrip = byId<HTMLCanvasElement>("d-strip");
const bars = byId<HTMLCanvasElement>("reward-bars");
const statusEl = byId<HTMLSpanElement>("status");
const controllerEl = byId<HTMLSpanElement>("controller");
const warnEl = byId<HTMLSpanElement>("warn");
const logEl = byId<HTMLUListElement>("event-log");
const vSlider = byId<HTMLInputElement>("v-slider");
const dSlider = byId<HTMLInputElement>("d-slider");
const takeBtn = byId<HTMLButtonElement>("take-control");
const pauseBtn = byId<HTMLButtonElement>("pause");

// scenario + controller selectors
const scenarioBox = byId<HTMLDivElement>("scenarios");
for (const name of SCENARIOS) {
  const b = document.createElement("button");
  b.textContent = name;
  b.onclick = () => {
    if (resetInFlight) return; // one in-flight reset at a time
    resetInFlight = true;
    client.send({ type: "reset", seq: input.nextSeq(), scenario: name as ScenarioName });
  };
  scenarioBox.appendChild(b);
}
const controllerBox = byId<HTMLDivElement>("controllers");
for (const id of CONTROLLERS) {
  const b = document.createElement("button");
  b.textContent = id;
  b.onclick = () =>
    client.send({ type: "select_controller", seq: input.nextSeq(), id: id as ControllerId });
  controllerBox.appendChild(b);
}

takeBtn.onclick = () => {
  const type = store.hasAuthority ? "release_control" : "take_control";
  client.send({ type, seq: input.nextSeq() });
};
pauseBtn.onclick = () => client.send({ type: "pause", seq: input.nextSeq() });

vSlider.oninput = () =>
  input.setSliders(parseFloat(vSlider.value), input.deltaCmdDeg);
dSlider.oninput = () =>
  input.setSliders(input.vCmd, parseFloat(dSlider.value));

document.addEventListener("keydown", (ev) => {
  input.keyDown(ev.key);
  if (ev.key.startsWith("Arrow")) ev.preventDefault();
});
document.addEventListener("keyup", (ev) => input.keyUp(ev.key));

client.connect();

function frame(): void {
  const now = Date.now() / 1000;
  const cmd = input.tick(now);
  if (cmd !== null) client.send(cmd);

  const s = store.latest;
  drawRollGauge(gauge, s ? s.phi : null);
  drawTrack(trackCanvas, store.track);
  drawStrip(vStrip, store.samples, (x) => x.v, (x) => x.vCmd, "v vs v_cmd [m/s]");
  drawStrip(dStrip, store.samples, (x) => x.delta * 180 / Math.PI,
            (x) => x.deltaCmdDeg, "delta vs delta_cmd [deg]");
  drawRewardBars(bars, s ? s.reward_terms : null);

  const stale = store.isStale();
  statusEl.textContent = stale
    ? `STALE (${store.status})`
    : `${store.status}${s?.paused ? " / paused" : ""}${s?.replay ? " / replay" : ""}`;
  statusEl.className = stale ? "stale" : "live";
  controllerEl.textContent = s ? `${s.controller} @ ${s.scenario ?? "?"}` : "-";
  warnEl.textContent = input.hasUnackedWarning(now) ? "commands unacknowledged!" : "";

  const entries = store.eventLog.slice(-8).reverse();
  logEl.innerHTML = entries
    .map((e) => `<li>[${e.kind}] ${e.detail}</li>`)
    .join("");

  requestAnimationFrame(frame);
}
requestAnimationFrame(frame);
