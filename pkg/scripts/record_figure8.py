#!/usr/bin/env python3
"""Record the operator-loop demo fixture: a scripted keyboard figure-eight
steered by 'the human' while the trained policy balances.

Emulates the dashboard's input machine (5 deg/s steering ramps, 20 Hz command
debounce, sequence numbers) against the real simulator, and captures the wire
messages both ways.  Output feeds frontend/test/fixtures/figure8_replay.json.

Usage: python3 scripts/record_figure8.py CHECKPOINT [OUT_JSON]
"""
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cyclerl.env import REWARD_TERM_NAMES
from cyclerl.harness import SCENARIOS, PolicyController

STEER_RAMP = 5.0      # deg/s, matches the dashboard keyboard ramp
SEND_HZ = 20.0
STATE_HZ = 20.0
DT = 0.02
V_CMD = 2.5

# (start_s, end_s, key): which arrow the operator holds
KEY_SCHEDULE = [
    (1.0, 2.6, "right"),    # ramp 0 -> +8 deg: first lobe
    (12.0, 15.2, "left"),   # ramp +8 -> -8 deg: cross into the second lobe
    (26.0, 29.2, "right"),  # ramp -8 -> +8 deg: cross back
    (32.0, 33.6, "left"),   # straighten out
]
DURATION_S = 35.0


def held_key(t: float):
    for start, end, key in KEY_SCHEDULE:
        if start <= t < end:
            return key
    return None


def main() -> int:
    ckpt = sys.argv[1]
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(
        "frontend/test/fixtures/figure8_replay.json"
    )
    controller = PolicyController(ckpt)
    scn = SCENARIOS["flat"]
    env_cfg = replace(scn.env_config(), episode_steps=10_000)
    from cyclerl.env import VecBikeEnv

    env = VecBikeEnv(1, replace(scn.build_spec(), initial_on=False), env_cfg, seed=12)
    obs = env.reset_all()
    env.hold_commands = True
    env.set_commands(V_CMD, 0.0)
    controller.reset(1)

    client_messages = [{"type": "take_control", "seq": 1}]
    server_messages = []
    seq = 1
    delta_cmd_deg = 0.0
    last_sent = (None, None)
    last_send_t = -1e9
    last_state_t = -1e9
    max_phi = 0.0
    last_terms = dict.fromkeys(REWARD_TERM_NAMES, 0.0)

    steps = int(DURATION_S / DT)
    for k in range(steps):
        t = k * DT
        key = held_key(t)
        if key is not None:
            delta_cmd_deg += (STEER_RAMP if key == "right" else -STEER_RAMP) * DT
            delta_cmd_deg = min(max(delta_cmd_deg, -10.0), 10.0)

        changed = (V_CMD, round(delta_cmd_deg, 6)) != last_sent
        if changed and (t - last_send_t) >= 1.0 / SEND_HZ:
            seq += 1
            client_messages.append({
                "type": "command", "seq": seq,
                "v_cmd": V_CMD, "delta_cmd_deg": round(delta_cmd_deg, 6),
            })
            env.set_commands(V_CMD, math.radians(delta_cmd_deg))
            last_sent = (V_CMD, round(delta_cmd_deg, 6))
            last_send_t = t

        action = controller.act(obs, env)
        step = env.step(action)
        obs = step.obs
        last_terms = dict(zip(REWARD_TERM_NAMES,
                              (float(x) for x in step.reward_terms[0])))
        max_phi = max(max_phi, abs(float(env.phi[0])))
        if bool(step.terminated[0]):
            print(f"FATAL: policy fell at t={t:.2f}s", file=sys.stderr)
            return 1

        if t - last_state_t >= 1.0 / STATE_HZ - 1e-9:
            server_messages.append({
                "type": "state",
                "t": round(float(env.t[0]), 6),
                "phi": round(float(env.phi[0]), 6),
                "phi_dot": round(float(env.phi_dot[0]), 6),
                "delta": round(float(env.delta[0]), 6),
                "v": round(float(env.v[0]), 6),
                "psi": round(float(env.psi[0]), 6),
                "x": round(float(env.x[0]), 6),
                "y": round(float(env.y[0]), 6),
                "v_cmd": float(env.v_cmd[0]),
                "delta_cmd_deg": round(math.degrees(float(env.delta_cmd[0])), 6),
                "reward_terms": {k2: round(v2, 6) for k2, v2 in last_terms.items()},
                "controller": "policy",
                "scenario": "flat",
            })
            last_state_t = t

    fixture = {
        "meta": {
            "controller": "policy",
            "scenario": "flat",
            "duration_s": DURATION_S,
            "max_abs_phi": round(max_phi, 6),
        },
        "client_messages": client_messages,
        "server_messages": server_messages,
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fixture) + "\n")
    print(f"recorded {len(client_messages)} client / {len(server_messages)} "
          f"server messages, max |phi| = {max_phi:.3f} rad -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
