"""Evaluation metrics over recorded episode traces.

Metric functions are pure: arrays in, numbers out, no RNG.  The nine report
fields:

  BSR  balance success rate, % of episodes with |phi| < 0.5 rad throughout
  BRT  recovery time after a roll impulse beyond 0.3 rad, s (mean +/- std)
  MBD  longest continuous balanced period, s
  CAT  critical (recoverable) roll angle keeping BSR > 95%, deg
  STE  steering-angle RMS error vs command, deg (1 s settling mask)
  VTE  velocity mean absolute error, m/s (same mask)
  SRL  response latency into a +/-10% band of a new command, s
  MNT  highest observation-noise fraction keeping BSR > 95%
  MSS  minimum sustained speed keeping BSR > 95%, m/s
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

BALANCE_LIMIT = 0.5       # rad, BSR criterion
RECOVERY_BAND = 0.1       # rad, BRT re-entry band
RECOVERY_SUSTAIN = 1.0    # s the band must hold
SETTLE_WINDOW = 1.0       # s excluded after each command change
LATENCY_BAND_FRAC = 0.1
LATENCY_FLOOR_DELTA = math.radians(0.5)  # band floor for near-zero steering targets
LATENCY_FLOOR_V = 0.05                   # m/s
RAD2DEG = 180.0 / math.pi


@dataclass
class TraceSet:
    """Batched per-step records for a set of independent episodes.

    Arrays are (episodes, steps); `alive[e, t]` marks steps up to and
    including episode e's terminal step.
    """

    dt: float
    t: np.ndarray
    phi: np.ndarray
    phi_dot: np.ndarray
    delta: np.ndarray
    v: np.ndarray
    psi: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v_cmd: np.ndarray
    delta_cmd: np.ndarray
    heading_err: np.ndarray
    actions: np.ndarray       # (E, T, 2)
    reward: np.ndarray
    reward_terms: np.ndarray  # (E, T, 5)
    alive: np.ndarray
    lengths: np.ndarray       # (E,)
    meta: dict = field(default_factory=dict)

    @property
    def n_episodes(self) -> int:
        return self.phi.shape[0]

    def episode_csv(self, path, episode: int = 0) -> None:
        """One row per step: t, state, commands, action, reward terms, total."""
        e = episode
        n = int(self.lengths[e])
        header = ["t", "phi", "phi_dot", "delta", "v", "psi", "x", "y",
                  "v_cmd", "delta_cmd", "heading_err", "a0", "a1",
                  "r_surv", "r_vel", "r_steer", "r_act", "r_rate", "reward"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for k in range(n):
                w.writerow([
                    repr(float(val)) for val in (
                        self.t[e, k], self.phi[e, k], self.phi_dot[e, k],
                        self.delta[e, k], self.v[e, k], self.psi[e, k],
                        self.x[e, k], self.y[e, k], self.v_cmd[e, k],
                        self.delta_cmd[e, k], self.heading_err[e, k],
                        self.actions[e, k, 0], self.actions[e, k, 1],
                        *self.reward_terms[e, k], self.reward[e, k],
                    )
                ])


# -- balance metrics -----------------------------------------------------------


def balance_success_rate(phi: np.ndarray, alive: np.ndarray,
                         limit: float = BALANCE_LIMIT) -> float:
    """Percent of episodes whose |phi| stays strictly below the limit."""
    phi = np.atleast_2d(phi)
    alive = np.atleast_2d(alive)
    if phi.shape[0] == 0:
        raise ValueError("no traces")
    exceeded = (np.abs(phi) >= limit) & alive
    return 100.0 * float(np.mean(~exceeded.any(axis=1)))


def max_balance_duration(phi: np.ndarray, alive: np.ndarray, dt: float,
                         limit: float = BALANCE_LIMIT) -> float:
    """Longest contiguous balanced stretch across all episodes, seconds."""
    phi = np.atleast_2d(phi)
    alive = np.atleast_2d(alive)
    ok = (np.abs(phi) < limit) & alive
    best = 0
    for row in ok:
        run = 0
        for flag in row:
            run = run + 1 if flag else 0
            best = max(best, run)
    return best * dt


def recovery_time(phi: np.ndarray, t: np.ndarray, t_impulse: float,
                  band: float = RECOVERY_BAND,
                  sustain: float = RECOVERY_SUSTAIN) -> float | None:
    """Time from the impulse until |phi| < band holds for `sustain` seconds.

    Returns 0.0 when already recovered at the impulse instant; None when the
    band is never held through the end of the trace.
    """
    t = np.asarray(t, dtype=np.float64)
    inside = np.abs(np.asarray(phi, dtype=np.float64)) < band
    start = int(np.searchsorted(t, t_impulse))
    if start >= len(t):
        return None
    dt = t[1] - t[0] if len(t) > 1 else sustain
    need = max(int(round(sustain / dt)), 1)
    run = 0
    for k in range(start, len(t)):
        run = run + 1 if inside[k] else 0
        if run >= need:
            entry = k - run + 1
            return float(t[entry] - t_impulse)
    return None


# -- control metrics -----------------------------------------------------------


def command_change_mask(v_cmd: np.ndarray, delta_cmd: np.ndarray) -> np.ndarray:
    """(E, T) bool; True at steps where either command changed."""
    v_cmd = np.atleast_2d(v_cmd)
    delta_cmd = np.atleast_2d(delta_cmd)
    changed = np.zeros(v_cmd.shape, dtype=bool)
    changed[:, 1:] = (np.diff(v_cmd, axis=1) != 0) | (np.diff(delta_cmd, axis=1) != 0)
    return changed


def settled_mask(v_cmd: np.ndarray, delta_cmd: np.ndarray, dt: float,
                 settle: float = SETTLE_WINDOW) -> np.ndarray:
    """True where at least `settle` seconds passed since the last command change
    (episode start counts as a change)."""
    changed = command_change_mask(v_cmd, delta_cmd)
    changed[:, 0] = True
    E, T = changed.shape
    need = int(round(settle / dt))
    mask = np.zeros((E, T), dtype=bool)
    for e in range(E):
        since = need  # pretend a long-ago change so the loop below resets it
        for k in range(T):
            since = 0 if changed[e, k] else since + 1
            mask[e, k] = since >= need
    return mask


def tracking_errors(delta, delta_cmd, v, v_cmd, alive, dt: float,
                    settle: float = SETTLE_WINDOW) -> tuple[float, float]:
    """(STE deg RMS, VTE m/s MAE) over settled, alive steps."""
    delta = np.atleast_2d(delta)
    delta_cmd = np.atleast_2d(delta_cmd)
    v = np.atleast_2d(v)
    v_cmd = np.atleast_2d(v_cmd)
    alive = np.atleast_2d(alive)
    mask = settled_mask(v_cmd, delta_cmd, dt, settle) & alive
    if not mask.any():
        return float("nan"), float("nan")
    derr = (delta - delta_cmd)[mask] * RAD2DEG
    verr = np.abs(v - v_cmd)[mask]
    return float(np.sqrt(np.mean(derr**2))), float(np.mean(verr))


def response_latencies(tracked, cmd, t, alive, band_frac: float = LATENCY_BAND_FRAC,
                       floor: float = 0.0):
    """Per command-change event, the time until `tracked` first enters the
    +/-(band_frac*|target|, floored) band -> (latencies list, timeouts)."""
    tracked = np.atleast_2d(tracked)
    cmd = np.atleast_2d(cmd)
    t = np.atleast_2d(t)
    alive = np.atleast_2d(alive)
    latencies, timeouts = [], 0
    for e in range(cmd.shape[0]):
        change_idx = np.nonzero(np.diff(cmd[e]) != 0)[0] + 1
        for i in change_idx:
            if not alive[e, i]:
                continue
            target = cmd[e, i]
            band = max(band_frac * abs(target), floor)
            end = int(np.nonzero(alive[e])[0][-1]) + 1
            seg = np.abs(tracked[e, i:end] - target) <= band
            hits = np.nonzero(seg)[0]
            if hits.size:
                latencies.append(float(t[e, i + hits[0]] - t[e, i]))
            else:
                timeouts += 1
    return latencies, timeouts


def response_latency(traces: TraceSet) -> tuple[float, int, int]:
    """Mean SRL over both command channels -> (mean s, events, timeouts)."""
    lat_d, to_d = response_latencies(traces.delta, traces.delta_cmd, traces.t,
                                     traces.alive, floor=LATENCY_FLOOR_DELTA)
    lat_v, to_v = response_latencies(traces.v, traces.v_cmd, traces.t,
                                     traces.alive, floor=LATENCY_FLOOR_V)
    lats = lat_d + lat_v
    timeouts = to_d + to_v
    mean = float(np.mean(lats)) if lats else float("nan")
    return mean, len(lats), timeouts


# -- report --------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    schema_version: int
    scenario: str
    controller: str
    seed: int
    episodes: int
    duration_steps: int
    dt: float
    bsr: float
    brt_mean: float | None = None
    brt_std: float | None = None
    mbd_s: float | None = None
    cat_deg: float | None = None
    ste_deg: float | None = None
    vte_mps: float | None = None
    srl_s: float | None = None
    srl_events: int | None = None
    srl_timeouts: int | None = None
    mnt: float | None = None
    mss_mps: float | None = None
    flags: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in list(d.items()):
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


CSV_FIELDS = ("scenario", "controller", "seed", "episodes", "bsr", "brt_mean",
              "brt_std", "mbd_s", "cat_deg", "ste_deg", "vte_mps", "srl_s",
              "mnt", "mss_mps")


def reports_to_csv(reports: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in reports:
            d = r.to_dict()
            w.writerow([d[k] if d[k] is not None else "" for k in CSV_FIELDS])
