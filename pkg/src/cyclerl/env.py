"""The balance/tracking MDP over a batch of independent bicycles.

Observations are 8 channels in physical units:
    [phi, phi_dot, delta, delta_dot, v, heading_err, v_cmd, delta_cmd]
Actions are 2 channels in [-1, 1]:
    a0 -> steering target a0 * DELTA_MAX, a1 -> speed target (a1+1)/2 * V_MAX.

The reward is a weighted sum of five terms (survival, velocity tracking,
heading tracking, action magnitude, action rate).  Episodes end on |phi|
beyond 45 degrees or at the step cap.

Every environment in the batch owns an independent RNG stream seeded from
(global seed, env index, episode index): per-episode reset draws come first,
then fixed-layout per-step noise rows, so results for environment i depend
only on environment i's seed, state, and actions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    CONTROL_DT,
    BikeState,
    DisturbanceConfig,
    PhysicalParams,
    _actuator,
    _kinematics,
    _roll_accel,
    action_to_targets,
    wrap_heading,
)
from .randomization import RandomizationSpec, reset_rng, sample_reset

PHI_TERMINATION = math.pi / 4  # 45 deg safety cut-off
EPISODE_STEPS = 3200           # 64 s at 50 Hz

OBS_DIM = 8
ACT_DIM = 2
OBS_NAMES = ("phi", "phi_dot", "delta", "delta_dot", "v", "heading_err", "v_cmd", "delta_cmd")
# Channel envelopes used to scale observation noise; command channels are not noised.
OBS_NOISE_SMAX = np.array([0.785, 3.0, 0.61, 7.0, 6.0, math.pi])
N_NOISED = 6

REWARD_TERM_NAMES = ("surv", "vel", "steer", "act", "rate")
REWARD_WEIGHTS = np.array([1.0, 3.0, 5.0, 1.0, 2.0])
VEL_ALPHA = 0.25   # per m/s
STEER_BETA = 0.1   # per degree
RAD2DEG = 180.0 / math.pi


@dataclass(frozen=True)
class RewardConfig:
    weights: tuple = tuple(REWARD_WEIGHTS)
    vel_alpha: float = VEL_ALPHA
    steer_beta: float = STEER_BETA
    target: str = "heading"  # "heading" tracks psi_desired, "steering" tracks delta_cmd

    def weight_array(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (5,):
            raise ValueError("reward weights must have 5 entries")
        return w


@dataclass
class CommandState:
    """Operator/task command channel for one bicycle."""

    v_cmd: float = 2.0           # m/s
    delta_cmd: float = 0.0       # rad
    next_resample_t: float = 4.0  # s
    psi_desired: float = 0.0     # rad, integrated reference heading


@dataclass(frozen=True)
class EnvConfig:
    dt: float = CONTROL_DT
    substeps: int = 1
    episode_steps: int = EPISODE_STEPS
    auto_reset: bool = True
    wheelbase: float = 1.1
    reward: RewardConfig = field(default_factory=RewardConfig)
    terrain: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    dropout_rate: float = 0.0  # probability a frame is lost (previous obs held)


def reward_kernel(v, v_cmd, heading_err, steer_err, a, a_prev, cfg: RewardConfig):
    """Vectorized composite reward -> (total, terms[..., 5]).

    Tracking errors arrive in radians; the steering/heading term converts to
    degrees before the exponential.
    """
    v = np.asarray(v, dtype=np.float64)
    err = heading_err if cfg.target == "heading" else steer_err
    err_deg = np.abs(np.asarray(err, dtype=np.float64)) * RAD2DEG
    a = np.asarray(a, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)

    r_surv = np.ones_like(v)
    r_vel = np.exp(-cfg.vel_alpha * np.abs(v - v_cmd))
    r_steer = np.exp(-cfg.steer_beta * err_deg)
    r_act = -np.abs(a).sum(axis=-1)
    r_rate = -np.sqrt(((a - a_prev) ** 2).sum(axis=-1))

    terms = np.stack([r_surv, r_vel, r_steer, r_act, r_rate], axis=-1)
    total = terms @ cfg.weight_array()
    return total, terms


def compute_reward(
    s: BikeState,
    s_prev: BikeState,
    a_t,
    a_prev,
    c: CommandState,
    cfg: RewardConfig = RewardConfig(),
) -> tuple[float, dict]:
    """Single-bike reward; actions must already be clamped to [-1, 1]^2."""
    heading_err = float(wrap_heading(c.psi_desired - s.psi))
    steer_err = s.delta - c.delta_cmd
    total, terms = reward_kernel(s.v, c.v_cmd, heading_err, steer_err,
                                 np.asarray(a_t), np.asarray(a_prev), cfg)
    return float(total), dict(zip(REWARD_TERM_NAMES, np.atleast_2d(terms)[0]))


def check_termination(phi, step_idx, *, phi_limit: float = PHI_TERMINATION,
                      max_steps: int = EPISODE_STEPS):
    """(terminated, truncated); elementwise over arrays."""
    if np.any(np.asarray(step_idx) < 0):
        raise ValueError("step_idx must be >= 0")
    terminated = np.abs(phi) > phi_limit
    truncated = np.asarray(step_idx) >= max_steps
    return terminated, truncated


def observe(s: BikeState, c: CommandState, p: PhysicalParams, rng) -> np.ndarray:
    """Build one 8-channel observation with per-channel Gaussian sensor noise.

    Noise std per channel is rho * s_max; command channels stay clean.
    """
    if not (0.0 <= p.obs_noise_frac <= 0.5):
        raise ValueError("obs_noise_frac must lie in [0, 0.5]")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    heading_err = float(wrap_heading(c.psi_desired - s.psi))
    obs = np.array(
        [s.phi, s.phi_dot, s.delta, s.delta_dot, s.v, heading_err, c.v_cmd, c.delta_cmd],
        dtype=np.float64,
    )
    noise = gen.standard_normal(N_NOISED)
    obs[:N_NOISED] += p.obs_noise_frac * OBS_NOISE_SMAX * noise
    return obs


def resample_commands(
    c: CommandState,
    t: float,
    rng,
    spec: RandomizationSpec | None = None,
) -> CommandState:
    """Hold commands until next_resample_t, then draw fresh targets."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t < c.next_resample_t:
        return replace(c)
    spec = spec if spec is not None else RandomizationSpec.full()
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    u = gen.random(3)
    return CommandState(
        v_cmd=spec.v_cmd.sample(u[0]),
        delta_cmd=spec.delta_cmd.sample(u[1]),
        next_resample_t=t + spec.resample_interval.sample(u[2]),
        psi_desired=c.psi_desired,
    )


def advance_reference(c: CommandState, dt: float, wheelbase: float) -> CommandState:
    """Integrate the reference heading implied by the current commands."""
    psi_dot_ref = c.v_cmd * math.tan(c.delta_cmd) / wheelbase
    return replace(c, psi_desired=c.psi_desired + psi_dot_ref * dt)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    reward_terms: dict
    terminated: bool
    truncated: bool
    info: dict


@dataclass
class StepBatch:
    obs: np.ndarray          # (N, 8) float64, with sensor noise / dropouts
    true_obs: np.ndarray     # (N, 8) noise-free twin (privileged value input)
    reward: np.ndarray       # (N,)
    reward_terms: np.ndarray  # (N, 5)
    terminated: np.ndarray   # (N,) bool
    truncated: np.ndarray    # (N,) bool
    final_obs: np.ndarray    # (N, 8); meaningful where terminated|truncated
    final_true_obs: np.ndarray
    episodes: list           # (length, return) for episodes finished this step

    def result(self, i: int) -> StepResult:
        done = bool(self.terminated[i] or self.truncated[i])
        return StepResult(
            obs=self.obs[i].copy(),
            reward=float(self.reward[i]),
            reward_terms=dict(zip(REWARD_TERM_NAMES, self.reward_terms[i])),
            terminated=bool(self.terminated[i]),
            truncated=bool(self.truncated[i]),
            info={"final_obs": self.final_obs[i].copy() if done else None},
        )


_NOISE_CHUNK = 64  # per-env noise rows buffered between generator refills


class VecBikeEnv:
    """Vectorized batch of independent bicycles with auto-reset.

    With auto_reset=False (evaluation mode) finished environments keep
    integrating harmlessly; callers track their own alive masks.
    """

    def __init__(
        self,
        num_envs: int,
        spec: RandomizationSpec | None = None,
        config: EnvConfig | None = None,
        seed: int = 0,
    ):
        if num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        self.num_envs = num_envs
        self.spec = spec if spec is not None else RandomizationSpec.full()
        self.spec.validate()
        self.cfg = config if config is not None else EnvConfig()
        if self.cfg.substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.seed = seed
        self.hold_commands = False  # teleop mode: operator owns the commands

        n = num_envs
        k = self.cfg.substeps
        self._k = k
        self._wn = 2 * k + N_NOISED   # normals: diffusion(k), jump(k), obs(6)
        self._wu = k + 4              # uniforms: jump(k), commands(3), dropout(1)

        self.phi = np.zeros(n)
        self.phi_dot = np.zeros(n)
        self.delta = np.zeros(n)
        self.delta_dot = np.zeros(n)
        self.v = np.full(n, 2.0)
        self.psi = np.zeros(n)
        self.x = np.zeros(n)
        self.y = np.zeros(n)
        self.t = np.zeros(n)
        self.step_idx = np.zeros(n, dtype=np.int64)

        self.v_cmd = np.full(n, 2.0)
        self.delta_cmd = np.zeros(n)
        self.psi_des = np.zeros(n)
        self.next_resample_t = np.full(n, np.inf)

        self.m_total = np.full(n, 25.0)
        self.h_com = np.full(n, 0.65)
        self.mu = np.ones(n)
        self.gain = np.ones(n)
        self.rho = np.zeros(n)
        self.hub_omega = np.zeros(n)

        self.diff_std = np.zeros(n)
        self.jump_rate = np.zeros(n)
        self.jump_std = np.zeros(n)
        self.slope = np.zeros(n)

        self.prev_action = np.zeros((n, ACT_DIM))
        self.prev_obs = np.zeros((n, OBS_DIM))
        self.prev_true_obs = np.zeros((n, OBS_DIM))
        self.ep_len = np.zeros(n, dtype=np.int64)
        self.ep_return = np.zeros(n)
        self.episode_idx = np.full(n, -1, dtype=np.int64)

        self._gen: list = [None] * n
        self._noise_n = np.zeros((n, _NOISE_CHUNK, self._wn))
        self._noise_u = np.zeros((n, _NOISE_CHUNK, self._wu))
        self._pos = np.zeros(n, dtype=np.int64)
        self._arange = np.arange(n)

    # -- lifecycle -----------------------------------------------------------

    def _refill(self, i: int) -> None:
        g = self._gen[i]
        self._noise_n[i] = g.standard_normal((_NOISE_CHUNK, self._wn))
        self._noise_u[i] = g.random((_NOISE_CHUNK, self._wu))

    def _reset_env(self, i: int) -> None:
        self.episode_idx[i] += 1
        gen = reset_rng(self.seed, i, int(self.episode_idx[i]))
        self._gen[i] = gen
        state, params, commands, terrain, values = sample_reset(self.spec, gen)

        self.phi[i] = state.phi
        self.phi_dot[i] = state.phi_dot
        self.delta[i] = state.delta
        self.delta_dot[i] = state.delta_dot
        self.v[i] = state.v
        self.psi[i] = 0.0
        self.x[i] = 0.0
        self.y[i] = 0.0
        self.t[i] = 0.0
        self.step_idx[i] = 0

        self.m_total[i] = params.m_total
        self.h_com[i] = params.h_com
        self.mu[i] = params.mu
        self.gain[i] = params.actuator_gain
        self.rho[i] = params.obs_noise_frac
        self.hub_omega[i] = values["hub_omega_init"]

        self.v_cmd[i] = commands.v_cmd
        self.delta_cmd[i] = commands.delta_cmd
        self.psi_des[i] = 0.0
        self.next_resample_t[i] = commands.next_resample_t

        base = self.cfg.terrain
        if self.spec.terrain_on:
            self.diff_std[i] = terrain.diffusion_std
            self.jump_rate[i] = terrain.jump_rate
            self.jump_std[i] = terrain.jump_std
            self.slope[i] = terrain.slope_angle
        else:
            self.diff_std[i] = base.eff_diffusion_std
            self.jump_rate[i] = base.eff_jump_rate
            self.jump_std[i] = base.eff_jump_std
            self.slope[i] = base.eff_slope

        self.prev_action[i] = 0.0
        self.ep_len[i] = 0
        self.ep_return[i] = 0.0

        self._refill(i)
        # Row 0 feeds the initial observation's sensor noise.
        k = self._k
        true0 = np.array(
            [self.phi[i], self.phi_dot[i], self.delta[i], self.delta_dot[i],
             self.v[i], 0.0, self.v_cmd[i], self.delta_cmd[i]]
        )
        obs = true0.copy()
        obs[:N_NOISED] += self.rho[i] * OBS_NOISE_SMAX * self._noise_n[i, 0, 2 * k:2 * k + N_NOISED]
        self.prev_obs[i] = obs
        self.prev_true_obs[i] = true0
        self._pos[i] = 1

    def reset_all(self) -> np.ndarray:
        for i in range(self.num_envs):
            self._reset_env(i)
        return self.prev_obs.copy()

    # -- teleop / protocol hooks ----------------------------------------------

    def set_commands(self, v_cmd: float, delta_cmd: float, env_idx: int = 0) -> None:
        self.v_cmd[env_idx] = v_cmd
        self.delta_cmd[env_idx] = delta_cmd

    def inject_roll(self, phi_value, env_idx=None) -> None:
        if env_idx is None:
            self.phi[:] = phi_value
            self.phi_dot[:] = 0.0
        else:
            self.phi[env_idx] = phi_value
            self.phi_dot[env_idx] = 0.0

    # -- stepping --------------------------------------------------------------

    def _consume_noise(self):
        rows_n = self._noise_n[self._arange, self._pos]
        rows_u = self._noise_u[self._arange, self._pos]
        self._pos += 1
        wrapped = np.nonzero(self._pos >= _NOISE_CHUNK)[0]
        for i in wrapped:
            self._refill(int(i))
            self._pos[i] = 0
        return rows_n, rows_u

    def step(self, actions: np.ndarray) -> StepBatch:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, ACT_DIM):
            raise ValueError(
                f"actions must have shape {(self.num_envs, ACT_DIM)}, got {actions.shape}"
            )
        cfg = self.cfg
        a = np.clip(actions, -1.0, 1.0)
        delta_target, v_target = action_to_targets(a[:, 0], a[:, 1])

        rows_n, rows_u = self._consume_noise()
        k = self._k
        dt_sub = cfg.dt / k
        sqrt_dt = math.sqrt(dt_sub)
        g = 9.81
        b = cfg.wheelbase

        for j in range(k):
            self.delta, self.delta_dot, self.v = _actuator(
                self.delta, self.v, delta_target, v_target, self.gain, dt_sub
            )
            acc = _roll_accel(self.phi, self.delta, self.v, g, self.h_com, b,
                              self.mu, self.slope)
            self.phi_dot = self.phi_dot + acc * dt_sub \
                + self.diff_std * sqrt_dt * rows_n[:, j]
            jump_mask = rows_u[:, j] < self.jump_rate * dt_sub
            if jump_mask.any():
                self.phi_dot = self.phi_dot + jump_mask * self.jump_std * rows_n[:, k + j]
            self.phi = self.phi + self.phi_dot * dt_sub
            psi_dot, x_dot, y_dot = _kinematics(self.delta, self.v, self.psi, b)
            self.psi = self.psi + psi_dot * dt_sub
            self.x = self.x + x_dot * dt_sub
            self.y = self.y + y_dot * dt_sub

        self.t = self.t + cfg.dt
        self.step_idx += 1

        # Reference heading follows the commanded kinematic yaw rate.
        self.psi_des = self.psi_des + self.v_cmd * np.tan(self.delta_cmd) / b * cfg.dt
        heading_err = wrap_heading(self.psi_des - self.psi)
        steer_err = self.delta - self.delta_cmd

        reward, terms = reward_kernel(
            self.v, self.v_cmd, heading_err, steer_err, a, self.prev_action, cfg.reward
        )
        self.prev_action = a
        self.ep_len += 1
        self.ep_return = self.ep_return + reward

        terminated, truncated = check_termination(
            self.phi, self.step_idx, max_steps=cfg.episode_steps
        )

        # Command resampling (held in teleop mode or when the task group is off).
        if not self.hold_commands and self.spec.task_on:
            due = self.t >= self.next_resample_t
            if due.any():
                u = rows_u[:, k:k + 3]
                self.v_cmd = np.where(due, self.spec.v_cmd.sample(u[:, 0]), self.v_cmd)
                self.delta_cmd = np.where(
                    due, self.spec.delta_cmd.sample(u[:, 1]), self.delta_cmd
                )
                self.next_resample_t = np.where(
                    due, self.t + self.spec.resample_interval.sample(u[:, 2]),
                    self.next_resample_t,
                )

        true_obs = np.stack(
            [self.phi, self.phi_dot, self.delta, self.delta_dot, self.v,
             heading_err, self.v_cmd, self.delta_cmd],
            axis=1,
        )
        obs = true_obs.copy()
        obs[:, :N_NOISED] += self.rho[:, None] * OBS_NOISE_SMAX * rows_n[:, 2 * k:2 * k + N_NOISED]
        if cfg.dropout_rate > 0.0:
            dropped = rows_u[:, k + 3] < cfg.dropout_rate
            obs[dropped] = self.prev_obs[dropped]

        final_obs = obs.copy()
        final_true_obs = true_obs.copy()
        episodes = []
        done = terminated | truncated
        if cfg.auto_reset and done.any():
            for i in np.nonzero(done)[0]:
                episodes.append((int(self.ep_len[i]), float(self.ep_return[i])))
                self._reset_env(int(i))  # writes prev_obs[i] for the new episode
                obs[i] = self.prev_obs[i]
                true_obs[i] = self.prev_true_obs[i]
            keep = ~done
            self.prev_obs[keep] = obs[keep]
            self.prev_true_obs[keep] = true_obs[keep]
        else:
            self.prev_obs = obs.copy()
            self.prev_true_obs = true_obs.copy()

        return StepBatch(
            obs=obs,
            true_obs=true_obs,
            reward=reward,
            reward_terms=terms,
            terminated=terminated,
            truncated=truncated,
            final_obs=final_obs,
            final_true_obs=final_true_obs,
            episodes=episodes,
        )
