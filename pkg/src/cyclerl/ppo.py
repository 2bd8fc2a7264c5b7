"""PPO over the batched bicycle environment.

One epoch = one rollout/update cycle: collect horizon x num_envs transitions,
compute GAE with truncation-aware bootstrapping (timeouts bootstrap the value
of the final observation, falls bootstrap zero), then run shuffled minibatch
epochs of clipped-surrogate updates with Adam and cosine-annealed learning
rates.  Actor and critic are separate networks with separate optimizers; the
value coefficient scales the critic loss.

Everything is seeded; single-worker runs are bitwise reproducible, and the
TrainLog "timestamp" is the cumulative environment step count so logs from
identical runs compare byte-for-byte.
"""
from __future__ import annotations

import csv
import json
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import EnvConfig, VecBikeEnv
from .mlp import (
    AdamState,
    LOG_STD_MAX,
    LOG_STD_MIN,
    Mlp,
    TrainingFault,
    adam_step,
    backward,
    clip_global_norm,
    cosine_lr,
    gaussian_entropy,
    gaussian_log_prob,
)
from .policy import Critic, GaussianActor, save_checkpoint
from .randomization import RandomizationSpec


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.003
    horizon: int = 64
    minibatches: int = 8
    update_epochs: int = 4
    num_envs: int = 256
    total_epochs: int = 300
    seed: int = 0
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    lr_floor_ratio: float = 0.1
    grad_clip: float = 1.0
    hidden: tuple = (64, 64)
    checkpoint_every: int = 50
    normalize_advantages: bool = True
    normalize_values: bool = True
    # Value function reads the noise-free simulator state (standard
    # privileged-critic setup); the actor always sees the sensor channels.
    privileged_critic: bool = True
    log_std_init: float = 0.0

    def validate(self) -> None:
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        for name in ("horizon", "minibatches", "update_epochs", "num_envs",
                     "total_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class RolloutBuffer:
    obs: np.ndarray           # (T, N, 8) float32, actor inputs
    critic_obs: np.ndarray    # (T, N, 8) float32, value-function inputs
    actions: np.ndarray       # (T, N, 2) clamped, float32
    actions_raw: np.ndarray   # (T, N, 2) pre-clamp, float64
    log_probs: np.ndarray     # (T, N) float64, pre-clamp density
    rewards: np.ndarray       # (T, N) float64
    values: np.ndarray        # (T, N) float64, return scale
    next_values: np.ndarray   # (T, N) float64; 0 at falls, V(final obs) at timeouts
    dones: np.ndarray         # (T, N) bool, episode boundary (either ending)
    terminated: np.ndarray    # (T, N) bool
    truncated: np.ndarray     # (T, N) bool
    reward_terms_mean: np.ndarray  # (5,)

    @property
    def horizon(self) -> int:
        return self.obs.shape[0]

    @property
    def num_envs(self) -> int:
        return self.obs.shape[1]


def collect_rollout(actor: GaussianActor, critic: Critic, env: VecBikeEnv,
                    horizon: int, rng: np.random.Generator,
                    obs: np.ndarray | None = None,
                    critic_obs: np.ndarray | None = None,
                    privileged: bool = True):
    """Step the batch `horizon` times -> (buffer, episodes, last obs pair)."""
    n = env.num_envs
    if obs is None:
        obs = env.reset_all()
        critic_obs = None
    if critic_obs is None:
        critic_obs = env.prev_true_obs.copy() if privileged else obs
    buf = RolloutBuffer(
        obs=np.empty((horizon, n, obs.shape[1]), dtype=np.float32),
        critic_obs=np.empty((horizon, n, obs.shape[1]), dtype=np.float32),
        actions=np.empty((horizon, n, 2), dtype=np.float32),
        actions_raw=np.empty((horizon, n, 2)),
        log_probs=np.empty((horizon, n)),
        rewards=np.empty((horizon, n)),
        values=np.empty((horizon, n)),
        next_values=np.empty((horizon, n)),
        dones=np.empty((horizon, n), dtype=bool),
        terminated=np.empty((horizon, n), dtype=bool),
        truncated=np.empty((horizon, n), dtype=bool),
        reward_terms_mean=np.zeros(5),
    )
    episodes = []
    for t in range(horizon):
        if not np.all(np.isfinite(obs)):
            raise TrainingFault("non-finite observation")
        raw, clamped, logp = actor.act(obs, rng)
        values = critic.value(critic_obs)
        step = env.step(clamped)
        next_critic_obs = step.true_obs if privileged else step.obs

        next_v = critic.value(next_critic_obs)
        if step.truncated.any():
            idx = np.nonzero(step.truncated)[0]
            final = step.final_true_obs if privileged else step.final_obs
            next_v[idx] = critic.value(final[idx])
        next_v = np.where(step.terminated, 0.0, next_v)

        buf.obs[t] = obs
        buf.critic_obs[t] = critic_obs
        buf.actions[t] = clamped
        buf.actions_raw[t] = raw
        buf.log_probs[t] = logp
        buf.rewards[t] = step.reward
        buf.values[t] = values
        buf.next_values[t] = next_v
        buf.terminated[t] = step.terminated
        buf.truncated[t] = step.truncated
        buf.dones[t] = step.terminated | step.truncated
        buf.reward_terms_mean += step.reward_terms.mean(axis=0)
        episodes.extend(step.episodes)
        obs = step.obs
        critic_obs = next_critic_obs
    buf.reward_terms_mean /= horizon
    return buf, episodes, (obs, critic_obs)


def compute_gae(rewards, values, next_values, dones, gamma: float, lam: float):
    """Recursive GAE -> (advantages, returns); returns = advantages + values.

    `next_values` must already reflect episode endings (zero after falls,
    bootstrap value after timeouts); `dones` cuts the exponential chain.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    deltas = rewards + gamma * np.asarray(next_values) - np.asarray(values)
    adv = np.zeros_like(deltas)
    carry = np.zeros(deltas.shape[1]) if deltas.ndim == 2 else 0.0
    not_done = ~np.asarray(dones, dtype=bool)
    for t in range(deltas.shape[0] - 1, -1, -1):
        carry = deltas[t] + gamma * lam * not_done[t] * carry
        adv[t] = carry
    return adv, adv + values


def compute_gae_from_buffer(buf: RolloutBuffer, gamma: float, lam: float):
    return compute_gae(buf.rewards, buf.values, buf.next_values, buf.dones, gamma, lam)


def clipped_surrogate(ratio, adv, clip_eps: float):
    """Per-sample clipped objective -> (term, unclipped_is_min, in_band)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    term = np.minimum(unclipped, clipped)
    return term, unclipped <= clipped, np.abs(ratio - 1.0) < clip_eps


def ppo_loss(actor: GaussianActor, critic: Critic, obs, actions_raw,
             old_log_probs, advantages, returns, cfg: TrainConfig,
             critic_obs=None):
    """Total loss and diagnostics at the current parameters (no gradients)."""
    new_logp = actor.log_prob(obs, actions_raw)
    ratio = np.exp(new_logp - np.asarray(old_log_probs, dtype=np.float64))
    term, _, _ = clipped_surrogate(ratio, advantages, cfg.clip_eps)
    surrogate = float(term.mean())
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))

    pred, _ = critic.raw_output(obs if critic_obs is None else critic_obs)
    target = np.asarray(returns, dtype=np.float64)
    if critic.value_norm is not None:
        target = critic.value_norm.normalize(target)
    value_mse = float(np.mean((np.asarray(pred, dtype=np.float64) - target) ** 2))

    entropy = gaussian_entropy(actor.log_std)
    approx_kl = float(np.mean((ratio - 1.0) - np.log(ratio)))
    loss = -surrogate + cfg.value_coef * value_mse - cfg.entropy_coef * entropy
    if not math.isfinite(loss):
        raise TrainingFault("non-finite loss")
    stats = {
        "surrogate": surrogate,
        "policy_loss": -surrogate,
        "value_mse": value_mse,
        "entropy": entropy,
        "clip_frac": clip_frac,
        "approx_kl": approx_kl,
        "loss": loss,
    }
    return loss, stats


def _log_std_grad_mask(log_std: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Zero gradients that would push a clamped log_std further out of range."""
    g = grad.copy()
    g[(log_std <= LOG_STD_MIN) & (g > 0)] = 0.0
    g[(log_std >= LOG_STD_MAX) & (g < 0)] = 0.0
    return g


class PpoTrainer:
    """Owns the agents, optimizers, and the epoch loop."""

    def __init__(self, cfg: TrainConfig, spec: RandomizationSpec | None = None,
                 env_cfg: EnvConfig | None = None):
        cfg.validate()
        self.cfg = cfg
        self.spec = spec if spec is not None else RandomizationSpec.full()
        self.env_cfg = env_cfg if env_cfg is not None else EnvConfig()
        self.env = VecBikeEnv(cfg.num_envs, self.spec, self.env_cfg, seed=cfg.seed)

        init_rng = np.random.default_rng([cfg.seed, 1])
        self.actor = GaussianActor.create(cfg.hidden, init_rng,
                                          log_std_init=cfg.log_std_init)
        self.critic = Critic.create(cfg.hidden, init_rng,
                                    normalize_values=cfg.normalize_values)
        self.sample_rng = np.random.default_rng([cfg.seed, 2])
        self.shuffle_rng = np.random.default_rng([cfg.seed, 3])

        actor_params = self.actor.mlp.param_list() + [self.actor.log_std]
        self.actor_adam = AdamState.init(actor_params)
        self.critic_adam = AdamState.init(self.critic.mlp.param_list())

        self.finished_lengths: deque = deque(maxlen=100)
        self.finished_returns: deque = deque(maxlen=100)
        self.env_steps = 0
        obs = self.env.reset_all()
        critic_obs = self.env.prev_true_obs.copy() if cfg.privileged_critic else obs
        self._obs = (obs, critic_obs)

    # -- one minibatch update ------------------------------------------------

    def _update_minibatch(self, obs, critic_obs, actions_raw, old_logp, adv,
                          target_norm, actor_lr, critic_lr):
        cfg = self.cfg
        B = obs.shape[0]

        mean, cache_a = self.actor.distribution(obs)
        mean64 = np.asarray(mean, dtype=np.float64)
        log_std = np.clip(self.actor.log_std.astype(np.float64),
                          LOG_STD_MIN, LOG_STD_MAX)
        sigma = np.exp(log_std)
        z = (actions_raw - mean64) / sigma
        new_logp = (-0.5 * np.sum(z * z, axis=1) - np.sum(log_std)
                    - 0.5 * actions_raw.shape[1] * math.log(2 * math.pi))
        ratio = np.exp(new_logp - old_logp)

        term, unclipped_min, in_band = clipped_surrogate(ratio, adv, cfg.clip_eps)
        active = unclipped_min | in_band
        d_logp = -(ratio * adv) * active / B          # d(-surrogate)/d(new_logp)
        d_mean = (d_logp[:, None] * z / sigma).astype(np.float32)
        # policy term wrt log_std, plus the entropy bonus (dH/dlog_std = 1)
        d_log_std = (d_logp[:, None] * (z * z - 1.0)).sum(axis=0) - cfg.entropy_coef
        d_log_std = _log_std_grad_mask(self.actor.log_std,
                                       d_log_std.astype(np.float32))

        bundle = backward(self.actor.mlp, cache_a, d_mean)
        actor_grads = bundle.param_grads() + [d_log_std]
        actor_grads, _ = clip_global_norm(actor_grads, cfg.grad_clip)
        actor_params = self.actor.mlp.param_list() + [self.actor.log_std]
        new_params, self.actor_adam = adam_step(actor_params, actor_grads,
                                                self.actor_adam, actor_lr)
        self.actor.mlp = Mlp.from_param_list(new_params[:-1])
        self.actor.log_std = new_params[-1]

        pred, cache_c = self.critic.raw_output(critic_obs)
        pred64 = np.asarray(pred, dtype=np.float64)
        value_mse = float(np.mean((pred64 - target_norm) ** 2))
        d_pred = (cfg.value_coef * 2.0 * (pred64 - target_norm) / B)
        c_bundle = backward(self.critic.mlp, cache_c,
                            d_pred[:, None].astype(np.float32))
        critic_grads, _ = clip_global_norm(c_bundle.param_grads(), cfg.grad_clip)
        new_c, self.critic_adam = adam_step(self.critic.mlp.param_list(),
                                            critic_grads, self.critic_adam,
                                            critic_lr)
        self.critic.mlp = Mlp.from_param_list(new_c)

        clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
        approx_kl = float(np.mean((ratio - 1.0) - np.log(ratio)))
        return {
            "policy_loss": float(-term.mean()),
            "value_loss": value_mse,
            "clip_frac": clip_frac,
            "approx_kl": approx_kl,
        }

    # -- one epoch -------------------------------------------------------------

    def run_epoch(self, epoch: int) -> dict:
        cfg = self.cfg
        buf, episodes, self._obs = collect_rollout(
            self.actor, self.critic, self.env, cfg.horizon, self.sample_rng,
            obs=self._obs[0], critic_obs=self._obs[1],
            privileged=cfg.privileged_critic,
        )
        self.env_steps += cfg.horizon * cfg.num_envs
        for length, ret in episodes:
            self.finished_lengths.append(length)
            self.finished_returns.append(ret)

        adv, returns = compute_gae_from_buffer(buf, cfg.gamma, cfg.gae_lambda)
        flat_obs = buf.obs.reshape(-1, buf.obs.shape[-1])
        flat_cobs = buf.critic_obs.reshape(-1, buf.critic_obs.shape[-1])
        flat_actions = buf.actions_raw.reshape(-1, buf.actions_raw.shape[-1])
        flat_logp = buf.log_probs.reshape(-1)
        flat_adv = adv.reshape(-1)
        flat_ret = returns.reshape(-1)

        if cfg.normalize_advantages:
            flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)
        if self.critic.value_norm is not None:
            self.critic.value_norm.update(flat_ret)
            target_norm = self.critic.value_norm.normalize(flat_ret)
        else:
            target_norm = flat_ret

        actor_lr = cosine_lr(epoch, cfg.total_epochs, cfg.actor_lr, cfg.lr_floor_ratio)
        critic_lr = cosine_lr(epoch, cfg.total_epochs, cfg.critic_lr, cfg.lr_floor_ratio)

        n_samples = flat_obs.shape[0]
        mb_size = n_samples // cfg.minibatches
        stats_acc: dict = {}
        n_updates = 0
        for _ in range(cfg.update_epochs):
            perm = self.shuffle_rng.permutation(n_samples)
            for k in range(cfg.minibatches):
                sel = perm[k * mb_size:(k + 1) * mb_size]
                stats = self._update_minibatch(
                    flat_obs[sel], flat_cobs[sel], flat_actions[sel],
                    flat_logp[sel], flat_adv[sel], target_norm[sel],
                    actor_lr, critic_lr,
                )
                for key, val in stats.items():
                    stats_acc[key] = stats_acc.get(key, 0.0) + val
                n_updates += 1
        for key in stats_acc:
            stats_acc[key] /= n_updates

        if self.finished_lengths:
            mean_len = float(np.mean(self.finished_lengths))
            mean_ret = float(np.mean(self.finished_returns))
        else:
            mean_len = float(np.mean(self.env.ep_len))
            mean_ret = float(np.mean(self.env.ep_return))

        terms = buf.reward_terms_mean
        return {
            "epoch": epoch,
            "env_steps": self.env_steps,
            "mean_ep_len": mean_len,
            "mean_ep_return": mean_ret,
            "mean_step_reward": float(buf.rewards.mean()),
            "r_surv": float(terms[0]),
            "r_vel": float(terms[1]),
            "r_steer": float(terms[2]),
            "r_act": float(terms[3]),
            "r_rate": float(terms[4]),
            "policy_loss": stats_acc["policy_loss"],
            "value_loss": stats_acc["value_loss"],
            "entropy": gaussian_entropy(self.actor.log_std),
            "clip_frac": stats_acc["clip_frac"],
            "approx_kl": stats_acc["approx_kl"],
            "actor_lr": actor_lr,
            "critic_lr": critic_lr,
        }


LOG_FIELDS = (
    "epoch", "env_steps", "mean_ep_len", "mean_ep_return", "mean_step_reward",
    "r_surv", "r_vel", "r_steer", "r_act", "r_rate",
    "policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl",
    "actor_lr", "critic_lr",
)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_rows: list
    log_csv: str
    log_jsonl: str
    faulted: bool = False


def write_train_log(rows: list, csv_path, jsonl_path) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in LOG_FIELDS])
    with open(jsonl_path, "w") as f:
        for row in rows:
            f.write(json.dumps({k: row[k] for k in LOG_FIELDS}, sort_keys=True) + "\n")


def train(cfg: TrainConfig, spec: RandomizationSpec | None = None,
          env_cfg: EnvConfig | None = None, out_dir: str = "runs/latest",
          config_hash: str = "", resolved_config: dict | None = None,
          progress=None) -> TrainResult:
    """Full training run; emits checkpoints plus CSV/JSONL logs under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = PpoTrainer(cfg, spec, env_cfg)
    rows: list = []
    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    csv_path = os.path.join(out_dir, "train_log.csv")
    jsonl_path = os.path.join(out_dir, "train_log.jsonl")
    if resolved_config is not None:
        with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
            json.dump(resolved_config, f, indent=2, sort_keys=True)

    def checkpoint(path):
        save_checkpoint(path, trainer.actor, trainer.critic,
                        training_step=trainer.env_steps, config_hash=config_hash)

    faulted = False
    try:
        for epoch in range(cfg.total_epochs):
            rows.append(trainer.run_epoch(epoch))
            if progress is not None:
                progress(rows[-1])
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint(os.path.join(out_dir, f"checkpoint_ep{epoch + 1}.ckpt"))
    except TrainingFault:
        faulted = True  # keep the last good checkpoint and logs
    checkpoint(final_path)
    write_train_log(rows, csv_path, jsonl_path)
    return TrainResult(final_path, rows, csv_path, jsonl_path, faulted)
