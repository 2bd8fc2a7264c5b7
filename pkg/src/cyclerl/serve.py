"""Live-simulation websocket service and trace replay.

One asyncio task owns the single simulated bicycle and steps it at the
control rate in wall-clock time; connection handlers never touch simulation
state directly - they enqueue validated messages that the loop applies at
the next tick.  State is broadcast at a lower rate to every viewer; exactly
one client at a time holds command authority (first-come, explicit takeover).

Wire protocol: JSON messages over /ws, discriminated by "type"; every client
message carries a "seq" echoed in the ack.  Malformed input gets an "error"
reply and never disturbs the loop.
"""
from __future__ import annotations

import asyncio
import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles

from .env import REWARD_TERM_NAMES
from .harness import SCENARIOS, make_controller

CMD_V_RANGE = (0.0, 5.0)
CMD_DELTA_DEG_RANGE = (-10.0, 10.0)

CONTROLLER_IDS = ("policy", "pid", "lqr")


def validate_client_message(data) -> tuple[dict | None, str | None]:
    """Hand-rolled check mirroring schemas/wire.schema.json -> (msg, error)."""
    if not isinstance(data, dict):
        return None, "message must be a JSON object"
    mtype = data.get("type")
    seq = data.get("seq")
    if not isinstance(seq, int) or seq < 0:
        return None, "missing or invalid seq"
    if mtype == "command":
        v = data.get("v_cmd")
        d = data.get("delta_cmd_deg")
        if not isinstance(v, (int, float)) or not isinstance(d, (int, float)):
            return None, "command needs numeric v_cmd and delta_cmd_deg"
        if not (math.isfinite(v) and math.isfinite(d)):
            return None, "command values must be finite"
        return data, None
    if mtype == "reset":
        if data.get("scenario") not in SCENARIOS:
            return None, f"unknown scenario {data.get('scenario')!r}"
        return data, None
    if mtype == "pause":
        return data, None
    if mtype == "select_controller":
        if data.get("id") not in CONTROLLER_IDS:
            return None, f"unknown controller {data.get('id')!r}"
        return data, None
    if mtype in ("take_control", "release_control"):
        return data, None
    return None, f"unknown message type {mtype!r}"


class Client:
    _ids = iter(range(1, 1 << 31))

    def __init__(self, ws: WebSocket):
        self.ws = ws
        self.id = next(Client._ids)

    async def send(self, payload: dict) -> bool:
        try:
            await self.ws.send_text(json.dumps(payload))
            return True
        except Exception:
            return False


class SimService:
    """Owns the simulated bicycle, its controller, and all clients."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        serve = cfg["serve"]
        self.control_dt = 1.0 / serve["control_hz"]
        self.state_period = 1.0 / serve["state_hz"]
        self.auto_reset_delay = serve["auto_reset_delay"]
        self.checkpoint = serve.get("checkpoint")
        self.controller_id = serve["controller"]
        self.scenario_name = serve["scenario"]
        self.default_v_cmd = serve["default_v_cmd"]

        self.controller = self._build_controller(self.controller_id)
        self.env = None
        self.obs = None
        self.last_terms = dict.fromkeys(REWARD_TERM_NAMES, 0.0)
        self.paused = False
        self.reset_pending = False
        self.seed = 0

        self.clients: dict = {}
        self.lease_holder: int | None = None
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.tick_count = 0
        self._stop = asyncio.Event()

    # -- construction helpers ---------------------------------------------

    def _build_controller(self, kind: str):
        if kind == "policy":
            if not self.checkpoint:
                raise ValueError("policy controller requires serve.checkpoint")
            return make_controller("policy", self.checkpoint)
        return make_controller(kind)

    def _build_env(self) -> None:
        from .env import VecBikeEnv

        scn = SCENARIOS[self.scenario_name]
        self.seed += 1
        env = VecBikeEnv(1, scn.build_spec(), scn.env_config(), seed=self.seed)
        obs = env.reset_all()
        env.hold_commands = True
        env.set_commands(self.default_v_cmd, 0.0)
        self.env = env
        self.obs = obs
        self.controller.reset(1)

    # -- client management ---------------------------------------------------

    async def attach(self, ws: WebSocket) -> Client:
        client = Client(ws)
        self.clients[client.id] = client
        return client

    async def detach(self, client: Client) -> None:
        self.clients.pop(client.id, None)
        if self.lease_holder == client.id:
            self.lease_holder = None
            await self.broadcast({"type": "event", "kind": "lease_released"})

    async def broadcast(self, payload: dict) -> None:
        dead = []
        for cid, client in list(self.clients.items()):
            ok = await client.send(payload)
            if not ok:
                dead.append(cid)
        for cid in dead:
            self.clients.pop(cid, None)

    # -- message handling ------------------------------------------------------

    async def handle(self, client: Client, raw: str) -> None:
        try:
            data = json.loads(raw)
        except json.JSONDecodeError:
            await client.send({"type": "error", "seq": None,
                               "detail": "not valid JSON"})
            return
        msg, err = validate_client_message(data)
        if err is not None:
            seq = data.get("seq") if isinstance(data, dict) else None
            await client.send({"type": "error",
                               "seq": seq if isinstance(seq, int) else None,
                               "detail": err})
            return
        mtype = msg["type"]

        if mtype == "take_control":
            previous = self.lease_holder
            self.lease_holder = client.id
            await client.send({"type": "ack", "seq": msg["seq"], "applied": {}})
            await client.send({"type": "event", "kind": "lease_granted"})
            if previous is not None and previous != client.id:
                prev = self.clients.get(previous)
                if prev is not None:
                    await prev.send({"type": "event", "kind": "lease_lost"})
            return
        if mtype == "release_control":
            if self.lease_holder == client.id:
                self.lease_holder = None
                await self.broadcast({"type": "event", "kind": "lease_released"})
            await client.send({"type": "ack", "seq": msg["seq"], "applied": {}})
            return

        # Remaining message types require command authority (first-come).
        if self.lease_holder is None:
            self.lease_holder = client.id
            await client.send({"type": "event", "kind": "lease_granted"})
        if self.lease_holder != client.id:
            await client.send({"type": "error", "seq": msg["seq"],
                               "detail": "command authority held by another operator"})
            await client.send({"type": "event", "kind": "lease_denied"})
            return

        if mtype == "command":
            v = min(max(float(msg["v_cmd"]), CMD_V_RANGE[0]), CMD_V_RANGE[1])
            d = min(max(float(msg["delta_cmd_deg"]), CMD_DELTA_DEG_RANGE[0]),
                    CMD_DELTA_DEG_RANGE[1])
            clamped = (v != msg["v_cmd"]) or (d != msg["delta_cmd_deg"])
            await self.inbox.put(("command", v, math.radians(d)))
            await client.send({
                "type": "ack", "seq": msg["seq"],
                "applied": {"v_cmd": v, "delta_cmd_deg": d},
                "clamped": clamped,
            })
        elif mtype == "pause":
            await self.inbox.put(("pause",))
            await client.send({"type": "ack", "seq": msg["seq"],
                               "applied": {"paused": not self.paused}})
        elif mtype == "reset":
            if self.reset_pending:
                await client.send({"type": "error", "seq": msg["seq"],
                                   "detail": "reset already in flight"})
                return
            self.reset_pending = True
            await self.inbox.put(("reset", msg["scenario"]))
            await client.send({"type": "ack", "seq": msg["seq"],
                               "applied": {"scenario": msg["scenario"]}})
        elif mtype == "select_controller":
            if msg["id"] == "policy" and not self.checkpoint:
                await client.send({"type": "error", "seq": msg["seq"],
                                   "detail": "no checkpoint configured for the policy"})
                return
            await self.inbox.put(("controller", msg["id"]))
            await client.send({"type": "ack", "seq": msg["seq"],
                               "applied": {"controller": msg["id"]}})

    def _apply_inbox(self) -> list:
        """Drain queued operator inputs at the start of a tick."""
        events = []
        while True:
            try:
                item = self.inbox.get_nowait()
            except asyncio.QueueEmpty:
                break
            if item[0] == "command":
                self.env.set_commands(item[1], item[2])
            elif item[0] == "pause":
                self.paused = not self.paused
            elif item[0] == "reset":
                self.scenario_name = item[1]
                self._build_env()
                self.reset_pending = False
                events.append({"type": "event", "kind": "reset",
                               "detail": self.scenario_name})
            elif item[0] == "controller":
                self.controller_id = item[1]
                self.controller = self._build_controller(item[1])
                self.controller.reset(1)
        return events

    # -- simulation loop -----------------------------------------------------------

    def state_message(self) -> dict:
        env = self.env
        return {
            "type": "state",
            "t": float(env.t[0]),
            "phi": float(env.phi[0]),
            "phi_dot": float(env.phi_dot[0]),
            "delta": float(env.delta[0]),
            "v": float(env.v[0]),
            "psi": float(env.psi[0]),
            "x": float(env.x[0]),
            "y": float(env.y[0]),
            "v_cmd": float(env.v_cmd[0]),
            "delta_cmd_deg": math.degrees(float(env.delta_cmd[0])),
            "reward_terms": self.last_terms,
            "controller": self.controller_id,
            "paused": self.paused,
            "scenario": self.scenario_name,
        }

    async def run(self) -> None:
        self._build_env()
        next_tick = time.monotonic()
        last_broadcast = 0.0
        while not self._stop.is_set():
            events = self._apply_inbox()
            for ev in events:
                await self.broadcast(ev)

            if not self.paused:
                action = self.controller.act(self.obs, self.env)
                step = self.env.step(np.asarray(action))
                self.obs = step.obs
                self.last_terms = dict(
                    zip(REWARD_TERM_NAMES, (float(x) for x in step.reward_terms[0]))
                )
                self.tick_count += 1
                if bool(step.terminated[0]) or bool(step.truncated[0]):
                    kind = "fall" if bool(step.terminated[0]) else "timeout"
                    await self.broadcast({"type": "event", "kind": kind})
                    await self.broadcast(self.state_message())
                    await asyncio.sleep(self.auto_reset_delay)
                    self._build_env()
                    await self.broadcast({"type": "event", "kind": "reset",
                                          "detail": self.scenario_name})
                    next_tick = time.monotonic()
                    continue

            now = time.monotonic()
            if now - last_broadcast >= self.state_period:
                await self.broadcast(self.state_message())
                last_broadcast = now

            next_tick += self.control_dt
            delay = next_tick - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            else:
                next_tick = time.monotonic()  # fell behind; resynchronize
                await asyncio.sleep(0)

    def stop(self) -> None:
        self._stop.set()


# -- replay ---------------------------------------------------------------------


def load_trace_csv(path) -> list:
    """Parse a recorded episode trace; raises ValueError on malformed rows."""
    required = ["t", "phi", "phi_dot", "delta", "v", "psi", "x", "y",
                "v_cmd", "delta_cmd", "r_surv", "r_vel", "r_steer", "r_act",
                "r_rate"]
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError("empty trace file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"trace file missing columns: {missing}")
        for i, row in enumerate(reader):
            try:
                rows.append({k: float(row[k]) for k in required})
            except (TypeError, ValueError, KeyError) as exc:
                raise ValueError(f"malformed trace row {i + 2}") from exc
    if not rows:
        raise ValueError("trace file has no data rows")
    return rows


class ReplayService:
    """Streams a recorded trace over the same wire protocol."""

    def __init__(self, rows: list, speed: float = 1.0, controller_id: str = "policy",
                 loop_forever: bool = False, wait_for_client: bool = True):
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.rows = rows
        self.speed = speed
        self.controller_id = controller_id
        self.loop_forever = loop_forever
        self.wait_for_client = wait_for_client
        self.clients: dict = {}
        self._stop = asyncio.Event()
        self.finished = asyncio.Event()

    async def attach(self, ws: WebSocket) -> Client:
        client = Client(ws)
        self.clients[client.id] = client
        return client

    async def detach(self, client: Client) -> None:
        self.clients.pop(client.id, None)

    async def handle(self, client: Client, raw: str) -> None:
        await client.send({"type": "error", "seq": None,
                           "detail": "replay stream accepts no commands"})

    async def broadcast(self, payload: dict) -> None:
        for client in list(self.clients.values()):
            await client.send(payload)

    def row_message(self, row: dict) -> dict:
        return {
            "type": "state",
            "t": row["t"], "phi": row["phi"], "phi_dot": row["phi_dot"],
            "delta": row["delta"], "v": row["v"], "psi": row["psi"],
            "x": row["x"], "y": row["y"], "v_cmd": row["v_cmd"],
            "delta_cmd_deg": math.degrees(row["delta_cmd"]),
            "reward_terms": {
                "surv": row["r_surv"], "vel": row["r_vel"],
                "steer": row["r_steer"], "act": row["r_act"],
                "rate": row["r_rate"],
            },
            "controller": self.controller_id,
            "replay": True,
        }

    async def run(self) -> None:
        while self.wait_for_client and not self.clients and not self._stop.is_set():
            await asyncio.sleep(0.005)
        while not self._stop.is_set():
            start = time.monotonic()
            t0 = self.rows[0]["t"]
            for row in self.rows:
                if self._stop.is_set():
                    return
                due = start + (row["t"] - t0) / self.speed
                delay = due - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
                await self.broadcast(self.row_message(row))
            await self.broadcast({"type": "event", "kind": "timeout",
                                  "detail": "replay complete"})
            if not self.loop_forever:
                break
            await asyncio.sleep(0.5)
        self.finished.set()

    def stop(self) -> None:
        self._stop.set()


# -- app ---------------------------------------------------------------------------

FALLBACK_PAGE = """<!doctype html>
<html><head><title>cyclerl</title></head>
<body><h1>cyclerl live service</h1>
<p>The dashboard bundle is not built. Connect a websocket client to <code>/ws</code>.</p>
</body></html>
"""


def create_app(service, frontend_dir=None) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(service.run())
        try:
            yield
        finally:
            service.stop()
            try:
                await asyncio.wait_for(task, timeout=2.0)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                task.cancel()

    app = FastAPI(lifespan=lifespan)
    app.state.service = service

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        client = await service.attach(ws)
        try:
            while True:
                raw = await ws.receive_text()
                await service.handle(client, raw)
        except WebSocketDisconnect:
            pass
        finally:
            await service.detach(client)

    front = Path(frontend_dir) if frontend_dir else None
    if front is not None and (front / "index.html").exists():
        app.mount("/", StaticFiles(directory=str(front), html=True), name="ui")
    else:
        @app.get("/")
        async def index():
            return HTMLResponse(FALLBACK_PAGE)

    return app


def default_frontend_dir() -> Path | None:
    """Locate the built dashboard bundle when running from a source tree."""
    here = Path(__file__).resolve()
    for parent in here.parents:
        candidate = parent / "frontend" / "dist"
        if (candidate / "index.html").exists():
            return candidate
    return None
