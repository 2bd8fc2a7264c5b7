"""Evaluation harness: scenario definitions, batched episode runs, the
impulse-recovery protocol, bisection threshold searches (critical angle,
noise tolerance, minimum speed), the robustness matrix, and the reward /
randomization ablation runner.

Evaluation runs use fixed-length batches without auto-reset; every cell is
deterministic in (scenario, controller, seed).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import LqrConfig, LqrController, PidConfig, pid_action
from .dynamics import DisturbanceConfig, PhysicalParams
from .env import EPISODE_STEPS, EnvConfig, RewardConfig, VecBikeEnv, wrap_heading
from .metrics import (
    MetricsReport,
    REPORT_SCHEMA_VERSION,
    TraceSet,
    balance_success_rate,
    max_balance_duration,
    recovery_time,
    response_latency,
    tracking_errors,
)
from .policy import load_checkpoint
from .randomization import RandomizationSpec, VariableRange

DEG = math.pi / 180.0


@dataclass(frozen=True)
class ScenarioSpec:
    """One evaluation condition: command band, sensing, terrain, protocol."""

    name: str
    v_cmd_range: tuple = (1.0, 5.0)
    rho: float = 0.0                      # fixed observation-noise fraction
    dropout_rate: float = 0.0
    terrain: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    mu_range: tuple | None = None         # e.g. gravel traction band
    episodes: int = 200
    duration_steps: int = EPISODE_STEPS
    randomize_initial: bool = True
    phi0: float | None = None             # fixed initial roll (threshold probes)
    hold_speed: float | None = None       # pin v_init = v_cmd = value, delta_cmd = 0

    def build_spec(self) -> RandomizationSpec:
        base = RandomizationSpec.full()
        spec = replace(
            base,
            dynamics_on=True,
            m_total=VariableRange.fixed(base.m_total.nominal),
            h_com=VariableRange.fixed(base.h_com.nominal),
            mu=(VariableRange(*self.mu_range, base.mu.nominal)
                if self.mu_range else VariableRange.fixed(base.mu.nominal)),
            actuator_gain=VariableRange.fixed(base.actuator_gain.nominal),
            obs_noise_frac=VariableRange.fixed(self.rho),
            initial_on=self.randomize_initial,
            task_on=True,
            terrain_on=False,
            v_cmd=VariableRange(*self.v_cmd_range,
                                sum(self.v_cmd_range) / 2.0),
        )
        if self.phi0 is not None:
            spec = replace(spec, phi_init=VariableRange.fixed(self.phi0))
        if self.hold_speed is not None:
            v = self.hold_speed
            spec = replace(
                spec,
                v_init=VariableRange.fixed(v),
                v_cmd=VariableRange.fixed(v),
                delta_cmd=VariableRange.fixed(0.0),
            )
        return spec

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            auto_reset=False,
            episode_steps=self.duration_steps,
            terrain=self.terrain,
            dropout_rate=self.dropout_rate,
        )


SCENARIOS = {
    "flat": ScenarioSpec(name="flat"),
    "rough": ScenarioSpec(name="rough",
                          terrain=DisturbanceConfig(diffusion_std=0.15)),
    "gravel": ScenarioSpec(name="gravel", mu_range=(0.5, 0.7),
                           terrain=DisturbanceConfig(diffusion_std=0.25)),
    "slope": ScenarioSpec(name="slope",
                          terrain=DisturbanceConfig(slope_angle=0.087)),
    "steps": ScenarioSpec(name="steps",
                          terrain=DisturbanceConfig(jump_rate=0.5, jump_std=0.3)),
    "max_noise": ScenarioSpec(name="max_noise", rho=0.2),
    "dropouts": ScenarioSpec(name="dropouts", dropout_rate=0.10),
    "low_speed": ScenarioSpec(name="low_speed", v_cmd_range=(1.0, 3.0)),
    "normal_speed": ScenarioSpec(name="normal_speed", v_cmd_range=(3.0, 5.0)),
}


# -- controllers ----------------------------------------------------------------


class PolicyController:
    """Deterministic (mean-action) policy playback from a checkpoint."""

    name = "policy"

    def __init__(self, checkpoint_path):
        self.actor = load_checkpoint(checkpoint_path).actor

    def reset(self, n: int) -> None:
        pass

    def act(self, obs, env) -> np.ndarray:
        _, clamped, _ = self.actor.act(obs, None, deterministic=True)
        return np.atleast_2d(clamped)


class PidBaseline:
    name = "pid"

    def __init__(self, cfg: PidConfig = PidConfig()):
        self.cfg = cfg

    def reset(self, n: int) -> None:
        pass

    def act(self, obs, env) -> np.ndarray:
        e_psi = wrap_heading(env.psi_des - env.psi)
        return pid_action(env.phi, env.phi_dot, env.v, e_psi,
                          env.v_cmd, env.delta_cmd, self.cfg)


class LqrBaseline:
    name = "lqr"

    def __init__(self, cfg: LqrConfig = LqrConfig(),
                 params: PhysicalParams | None = None):
        self.cfg = cfg
        self.params = params
        self.ctl = None

    def reset(self, n: int) -> None:
        self.ctl = LqrController(self.cfg, self.params, n)

    def act(self, obs, env) -> np.ndarray:
        return self.ctl(env.phi, env.phi_dot, env.delta, env.v,
                        env.v_cmd, env.delta_cmd)


def make_controller(kind: str, checkpoint=None):
    if kind == "policy":
        if checkpoint is None:
            raise ValueError("policy controller needs a checkpoint path")
        return PolicyController(checkpoint)
    if kind == "pid":
        return PidBaseline()
    if kind == "lqr":
        return LqrBaseline()
    raise ValueError(f"unknown controller {kind!r}")


# -- episode batches -------------------------------------------------------------


def run_episode_batch(controller, scenario: ScenarioSpec, n: int, seed: int,
                      impulse: tuple | None = None) -> TraceSet:
    """Run n independent episodes in lockstep and record full traces.

    `impulse` = (time s, roll rad) injects a roll step into every episode at
    the given instant (the recovery-time protocol).
    """
    env = VecBikeEnv(n, scenario.build_spec(), scenario.env_config(), seed=seed)
    obs = env.reset_all()
    controller.reset(n)
    T = scenario.duration_steps

    arrays = {name: np.zeros((n, T)) for name in
              ("t", "phi", "phi_dot", "delta", "v", "psi", "x", "y",
               "v_cmd", "delta_cmd", "heading_err", "reward")}
    actions = np.zeros((n, T, 2))
    terms = np.zeros((n, T, 5))
    alive = np.zeros((n, T), dtype=bool)
    live = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)

    impulse_step = None
    if impulse is not None:
        impulse_step = int(round(impulse[0] / env.cfg.dt))

    for k in range(T):
        if impulse_step is not None and k == impulse_step:
            env.inject_roll(impulse[1])
        a = controller.act(obs, env)
        step = env.step(a)
        obs = step.obs

        alive[:, k] = live
        lengths[live] += 1
        arrays["t"][:, k] = env.t
        arrays["phi"][:, k] = env.phi
        arrays["phi_dot"][:, k] = env.phi_dot
        arrays["delta"][:, k] = env.delta
        arrays["v"][:, k] = env.v
        arrays["psi"][:, k] = env.psi
        arrays["x"][:, k] = env.x
        arrays["y"][:, k] = env.y
        arrays["v_cmd"][:, k] = env.v_cmd
        arrays["delta_cmd"][:, k] = env.delta_cmd
        arrays["heading_err"][:, k] = wrap_heading(env.psi_des - env.psi)
        arrays["reward"][:, k] = step.reward
        actions[:, k] = a
        terms[:, k] = step.reward_terms
        live = live & ~step.terminated

    return TraceSet(
        dt=env.cfg.dt,
        actions=actions,
        reward=arrays.pop("reward"),
        reward_terms=terms,
        alive=alive,
        lengths=lengths,
        meta={"scenario": scenario.name, "controller": controller.name,
              "seed": seed, "episodes": n},
        **arrays,
    )


def balance_rate(controller, scenario: ScenarioSpec, n: int, seed: int) -> float:
    traces = run_episode_batch(controller, scenario, n, seed)
    return balance_success_rate(traces.phi, traces.alive)


# -- recovery-time protocol -------------------------------------------------------

BRT_IMPULSE = 0.35   # rad, just beyond the 0.3 rad disturbance threshold
BRT_SETTLE = 5.0     # s of stabilized running before the impulse
# Steering authority caps the statically recoverable lean at
# atan(v^2 tan(delta_max) / (b g)); 0.35 rad needs v >= ~2.45 m/s, so the
# protocol runs at 3 m/s where the impulse is recoverable for every
# controller that holds its commanded speed.
BRT_SPEED = 3.0


def measure_recovery(controller, n: int, seed: int,
                     impulse: float = BRT_IMPULSE,
                     settle: float = BRT_SETTLE,
                     window: float = 10.0,
                     speed: float = BRT_SPEED) -> tuple[float, float, list]:
    """(mean, std, per-episode recovery times); alternating impulse sign.

    Runs a command-quiet scenario at the protocol speed, injects
    phi = +/-impulse after the settling period, and measures re-entry into
    |phi| < 0.1 rad held for 1 s.  Episodes that never recover are dropped
    from the mean and reported in the list as None.
    """
    duration = int(round((settle + window) / 0.02))
    scenario = ScenarioSpec(name="brt", hold_speed=speed, episodes=n,
                            duration_steps=duration, randomize_initial=False)
    times: list = []
    for half, sign in ((0, 1.0), (1, -1.0)):
        m = n // 2 + (n % 2 if half == 0 else 0)
        if m == 0:
            continue
        traces = run_episode_batch(controller, scenario, m, seed + half,
                                   impulse=(settle, sign * impulse))
        for e in range(m):
            times.append(recovery_time(traces.phi[e], traces.t[e], settle))
    ok = [x for x in times if x is not None]
    mean = float(np.mean(ok)) if ok else float("nan")
    std = float(np.std(ok)) if ok else float("nan")
    return mean, std, times


# -- threshold searches -----------------------------------------------------------


@dataclass
class ThresholdResult:
    value: float
    flag: str          # "ok" | "saturated" | "degenerate"
    probes: list       # (axis value, BSR %) pairs


def bisect_threshold(probe, lo: float, hi: float, resolution: float,
                     success_low_side: bool, target: float = 95.0) -> ThresholdResult:
    """Boundary of {axis value : BSR(axis) > target} by bisection.

    success_low_side=True means BSR decreases along the axis (noise, angle):
    the search returns the highest passing value.  False means BSR increases
    (speed): the search returns the lowest passing value.
    """
    probes = []

    def passing(x):
        bsr = probe(x)
        probes.append((x, bsr))
        return bsr > target

    good_end, bad_end = (lo, hi) if success_low_side else (hi, lo)
    if not passing(good_end):
        return ThresholdResult(good_end, "degenerate", probes)
    if passing(bad_end):
        return ThresholdResult(bad_end, "saturated", probes)
    good, bad = good_end, bad_end
    while abs(bad - good) > resolution:
        mid = 0.5 * (good + bad)
        if passing(mid):
            good = mid
        else:
            bad = mid
    return ThresholdResult(good, "ok", probes)


def max_noise_tolerance(controller, seed: int, episodes: int = 100,
                        resolution: float = 0.01,
                        duration_steps: int = EPISODE_STEPS) -> ThresholdResult:
    def probe(rho):
        scn = ScenarioSpec(name=f"mnt_{rho:.3f}", rho=float(rho),
                           duration_steps=duration_steps)
        return balance_rate(controller, scn, episodes, seed)

    return bisect_threshold(probe, 0.0, 0.5, resolution, success_low_side=True)


def min_sustaining_speed(controller, seed: int, episodes: int = 100,
                         resolution: float = 0.05,
                         duration_steps: int = EPISODE_STEPS) -> ThresholdResult:
    def probe(v):
        scn = ScenarioSpec(name=f"mss_{v:.2f}", hold_speed=float(v),
                           duration_steps=duration_steps)
        return balance_rate(controller, scn, episodes, seed)

    return bisect_threshold(probe, 0.5, 5.0, resolution, success_low_side=False)


def critical_angle(controller, seed: int, episodes: int = 100,
                   resolution_deg: float = 0.25,
                   duration_steps: int = EPISODE_STEPS) -> ThresholdResult:
    """Max recoverable initial roll keeping BSR > 95%; min of both sides."""
    sides = []
    all_probes = []
    for sign in (1.0, -1.0):
        def probe(angle_deg, s=sign):
            scn = ScenarioSpec(name=f"cat_{s * angle_deg:+.2f}",
                               phi0=s * angle_deg * DEG,
                               duration_steps=duration_steps)
            return balance_rate(controller, scn, episodes, seed)

        res = bisect_threshold(probe, 0.0, 44.0, resolution_deg,
                               success_low_side=True)
        sides.append(res)
        all_probes.extend(res.probes)
    value = min(sides[0].value, sides[1].value)
    flag = "ok"
    if any(s.flag == "degenerate" for s in sides):
        flag = "degenerate"
    elif all(s.flag == "saturated" for s in sides):
        flag = "saturated"
    return ThresholdResult(value, flag, all_probes)


# -- full evaluation ---------------------------------------------------------------


def evaluate(controller, scenario: ScenarioSpec, episodes: int, seed: int,
             with_brt: bool = True, with_searches: bool = False,
             search_episodes: int = 100, config: dict | None = None,
             return_traces: bool = False):
    traces = run_episode_batch(controller, scenario, episodes, seed)
    ste, vte = tracking_errors(traces.delta, traces.delta_cmd, traces.v,
                               traces.v_cmd, traces.alive, traces.dt)
    srl, events, timeouts = response_latency(traces)
    report = MetricsReport(
        schema_version=REPORT_SCHEMA_VERSION,
        scenario=scenario.name,
        controller=controller.name,
        seed=seed,
        episodes=episodes,
        duration_steps=scenario.duration_steps,
        dt=traces.dt,
        bsr=balance_success_rate(traces.phi, traces.alive),
        mbd_s=max_balance_duration(traces.phi, traces.alive, traces.dt),
        ste_deg=ste,
        vte_mps=vte,
        srl_s=srl,
        srl_events=events,
        srl_timeouts=timeouts,
        config=config or {},
    )
    if with_brt:
        brt_mean, brt_std, _ = measure_recovery(controller, max(episodes // 4, 8),
                                                seed + 1000)
        report.brt_mean = brt_mean
        report.brt_std = brt_std
    if with_searches:
        mnt = max_noise_tolerance(controller, seed + 2000, search_episodes)
        mss = min_sustaining_speed(controller, seed + 3000, search_episodes)
        cat = critical_angle(controller, seed + 4000, search_episodes)
        report.mnt = mnt.value
        report.mss_mps = mss.value
        report.cat_deg = cat.value
        report.flags = {"mnt": mnt.flag, "mss": mss.flag, "cat": cat.flag}
    if return_traces:
        return report, traces
    return report


ROBUSTNESS_CELLS = (
    ("Velocity Range", "low_speed"),
    ("Velocity Range", "normal_speed"),
    ("Sensor Degradation", "flat"),
    ("Sensor Degradation", "max_noise"),
    ("Sensor Degradation", "dropouts"),
    ("Terrain Type", "flat"),
    ("Terrain Type", "rough"),
    ("Terrain Type", "gravel"),
    ("Terrain Type", "slope"),
    ("Terrain Type", "steps"),
)


def robustness_matrix(controller, episodes: int, seed: int,
                      config: dict | None = None, with_brt: bool = True,
                      duration_steps: int | None = None) -> list:
    """Reports for every robustness cell (category carried in flags)."""
    reports = []
    for category, scen_name in ROBUSTNESS_CELLS:
        scn = replace(SCENARIOS[scen_name], episodes=episodes)
        if duration_steps is not None:
            scn = replace(scn, duration_steps=duration_steps)
        rep = evaluate(controller, scn, episodes, seed, with_brt=with_brt,
                       config=config)
        rep.flags = {**rep.flags, "category": category}
        reports.append(rep)
    return reports


# -- ablations ---------------------------------------------------------------------

REWARD_ABLATIONS = (
    ("complete", None),
    ("no_survival", 0),
    ("no_velocity_tracking", 1),
    ("no_steering_tracking", 2),
    ("no_action_penalty", 3),
    ("no_rate_penalty", 4),
)

RANDOMIZATION_ABLATIONS = (
    ("full", dict(dynamics=True, initial=True, task=True, terrain=False)),
    ("none", dict(dynamics=False, initial=False, task=False, terrain=False)),
    ("dynamics_only", dict(dynamics=True, initial=False, task=False, terrain=False)),
    ("initial_only", dict(dynamics=False, initial=True, task=False, terrain=False)),
    ("command_only", dict(dynamics=False, initial=False, task=True, terrain=False)),
    ("terrain_only", dict(dynamics=False, initial=False, task=False, terrain=True)),
)


def run_ablation(kind: str, train_cfg, out_dir: str, eval_episodes: int = 64,
                 eval_seed: int = 9000, progress=None) -> list:
    """Train one configuration per ablation row (identical seeds) and
    evaluate each on the shared suite.  Returns rows of
    {name, bsr, ste_deg, vte_mps, d_bsr, d_ste, d_vte}."""
    from .ppo import train  # deferred to keep import cycles out
    from .env import RewardConfig

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    baseline = None
    if kind == "reward":
        variants = [(name, idx) for name, idx in REWARD_ABLATIONS]
    elif kind == "randomization":
        variants = list(RANDOMIZATION_ABLATIONS)
    else:
        raise ValueError("kind must be 'reward' or 'randomization'")

    eval_scn = replace(SCENARIOS["flat"], episodes=eval_episodes)
    for name, detail in variants:
        run_dir = os.path.join(out_dir, f"{kind}_{name}")
        spec = RandomizationSpec.full()
        env_cfg = EnvConfig()
        if kind == "reward":
            weights = list(RewardConfig().weights)
            if detail is not None:
                weights[detail] = 0.0
            env_cfg = EnvConfig(reward=RewardConfig(weights=tuple(weights)))
        else:
            spec = spec.with_groups(**detail)
        result = train(train_cfg, spec, env_cfg, out_dir=run_dir)
        controller = PolicyController(result.checkpoint_path)
        rep = evaluate(controller, eval_scn, eval_episodes, eval_seed,
                       with_brt=False)
        row = {"name": name, "bsr": rep.bsr, "ste_deg": rep.ste_deg,
               "vte_mps": rep.vte_mps}
        if baseline is None:
            baseline = row
            row["d_bsr"] = row["d_ste"] = row["d_vte"] = 0.0  # self-difference
        else:
            row["d_bsr"] = row["bsr"] - baseline["bsr"]
            row["d_ste"] = row["ste_deg"] - baseline["ste_deg"]
            row["d_vte"] = row["vte_mps"] - baseline["vte_mps"]
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def ablation_csv(rows: list, path) -> None:
    import csv as _csv

    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["configuration", "bsr", "d_bsr", "ste_deg", "d_ste",
                    "vte_mps", "d_vte"])
        for r in rows:
            w.writerow([r["name"], r["bsr"], r["d_bsr"], r["ste_deg"],
                        r["d_ste"], r["vte_mps"], r["d_vte"]])
