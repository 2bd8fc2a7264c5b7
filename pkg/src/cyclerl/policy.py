"""Actor/critic agents over the MLP substrate, plus checkpoint IO.

Observations stay in physical units end to end; both networks apply a fixed
per-channel input scaling (the channel envelopes) so the optimizer sees O(1)
inputs.  The critic optionally learns against normalized return targets with
a running mean/std, denormalizing on read.

Checkpoint container: magic "CYRL", u32 format version, u32 metadata length,
JSON metadata (topology, training step, config hash, array manifest), then
raw little-endian float32 arrays in manifest order.  Writer and reader
round-trip bit-exactly.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .env import OBS_DIM
from .mlp import (
    Mlp,
    Topology,
    clamp_log_std,
    forward,
    gaussian_log_prob,
    gaussian_policy_head,
    init_mlp,
)

# Fixed input transformation: divide each channel by its envelope magnitude.
OBS_INPUT_SCALE = np.array(
    [0.785, 3.0, 0.61, 7.0, 6.0, math.pi, 6.0, math.radians(10.0)], dtype=np.float32
)

CHECKPOINT_MAGIC = b"CYRL"
CHECKPOINT_VERSION = 1


@dataclass
class RunningNorm:
    """Debiased exponential moving mean/std, one decay step per update call.

    Return scales drift by an order of magnitude over a training run; a
    count-based accumulator freezes on early statistics, so normalization
    tracks a moving window instead (decay 0.95 ~ a twenty-update horizon).
    """

    decay: float = 0.95
    weight: float = 0.0
    m_mean: float = 0.0
    m_var: float = 0.0

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64).ravel()
        if batch.size == 0:
            return
        d = self.decay
        self.weight = d * self.weight + (1.0 - d)
        self.m_mean = d * self.m_mean + (1.0 - d) * float(batch.mean())
        self.m_var = d * self.m_var + (1.0 - d) * float(batch.var())

    @property
    def mean(self) -> float:
        if self.weight == 0.0:
            return 0.0
        return self.m_mean / self.weight

    @property
    def std(self) -> float:
        if self.weight == 0.0:
            return 1.0
        return max(math.sqrt(max(self.m_var / self.weight, 0.0)), 1e-6)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


class GaussianActor:
    """Diagonal-Gaussian policy: MLP mean plus a learnable state-free log_std."""

    def __init__(self, mlp: Mlp, log_std: np.ndarray, obs_scale: np.ndarray = OBS_INPUT_SCALE):
        self.mlp = mlp
        self.log_std = np.asarray(log_std, dtype=np.float32)
        self.obs_scale = np.asarray(obs_scale, dtype=np.float32)

    @classmethod
    def create(cls, hidden: tuple, rng, obs_dim: int = OBS_DIM, act_dim: int = 2,
               log_std_init: float = 0.0) -> "GaussianActor":
        mlp = init_mlp(Topology(obs_dim, tuple(hidden), act_dim), rng, out_gain=0.01)
        return cls(mlp, np.full(act_dim, log_std_init, dtype=np.float32))

    def scaled(self, obs) -> np.ndarray:
        return np.asarray(obs, dtype=np.float32) / self.obs_scale

    def distribution(self, obs):
        """(mean, forward cache) on envelope-scaled inputs."""
        return forward(self.mlp, self.scaled(obs))

    def act(self, obs, rng, deterministic: bool = False):
        """-> (action_raw, action_clamped, log_prob); density is pre-clamp."""
        mean, _ = self.distribution(obs)
        if deterministic:
            raw = np.asarray(mean, dtype=np.float64)
            logp = gaussian_log_prob(mean, self.log_std, raw)
        else:
            raw, logp = gaussian_policy_head(mean, self.log_std, rng)
        return raw, np.clip(raw, -1.0, 1.0), logp

    def log_prob(self, obs, actions_raw):
        mean, _ = self.distribution(obs)
        return gaussian_log_prob(mean, self.log_std, actions_raw)


class Critic:
    """State-value network; optionally trained on normalized return targets."""

    def __init__(self, mlp: Mlp, obs_scale: np.ndarray = OBS_INPUT_SCALE,
                 value_norm: RunningNorm | None = None):
        self.mlp = mlp
        self.obs_scale = np.asarray(obs_scale, dtype=np.float32)
        self.value_norm = value_norm

    @classmethod
    def create(cls, hidden: tuple, rng, obs_dim: int = OBS_DIM,
               normalize_values: bool = True) -> "Critic":
        mlp = init_mlp(Topology(obs_dim, tuple(hidden), 1), rng, out_gain=1.0)
        return cls(mlp, value_norm=RunningNorm() if normalize_values else None)

    def scaled(self, obs) -> np.ndarray:
        return np.asarray(obs, dtype=np.float32) / self.obs_scale

    def raw_output(self, obs):
        """(normalized prediction (B,), cache) for training."""
        out, cache = forward(self.mlp, self.scaled(obs))
        return np.atleast_2d(out)[..., 0], cache

    def value(self, obs) -> np.ndarray:
        """Values on the return scale."""
        pred, _ = self.raw_output(obs)
        pred = np.asarray(pred, dtype=np.float64)
        if self.value_norm is not None:
            pred = self.value_norm.denormalize(pred)
        return pred


# -- checkpoint container --------------------------------------------------------


def _manifest(actor: GaussianActor, critic: Critic):
    arrays = []
    for i, (w, b) in enumerate(zip(actor.mlp.weights, actor.mlp.biases)):
        arrays.append((f"actor.w{i}", w))
        arrays.append((f"actor.b{i}", b))
    arrays.append(("actor.log_std", actor.log_std))
    arrays.append(("actor.obs_scale", actor.obs_scale))
    for i, (w, b) in enumerate(zip(critic.mlp.weights, critic.mlp.biases)):
        arrays.append((f"critic.w{i}", w))
        arrays.append((f"critic.b{i}", b))
    arrays.append(("critic.obs_scale", critic.obs_scale))
    return arrays


def save_checkpoint(path, actor: GaussianActor, critic: Critic, *,
                    training_step: int = 0, config_hash: str = "",
                    extra: dict | None = None) -> None:
    arrays = _manifest(actor, critic)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "topology": {
            "actor": list(actor.mlp.topology.layer_sizes),
            "critic": list(critic.mlp.topology.layer_sizes),
        },
        "training_step": int(training_step),
        "config_hash": config_hash,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "value_norm": (
            None if critic.value_norm is None else
            {"decay": critic.value_norm.decay, "weight": critic.value_norm.weight,
             "m_mean": critic.value_norm.m_mean, "m_var": critic.value_norm.m_var}
        ),
    }
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


@dataclass
class Checkpoint:
    actor: GaussianActor
    critic: Critic
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a CYRL checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        arrays = {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("truncated checkpoint")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    def collect(prefix):
        ws, bs, i = [], [], 0
        while f"{prefix}.w{i}" in arrays:
            ws.append(arrays[f"{prefix}.w{i}"])
            bs.append(arrays[f"{prefix}.b{i}"])
            i += 1
        return Mlp(ws, bs)

    actor = GaussianActor(collect("actor"), arrays["actor.log_std"],
                          arrays["actor.obs_scale"])
    vn = None
    if meta.get("value_norm") is not None:
        d = meta["value_norm"]
        vn = RunningNorm(decay=d["decay"], weight=d["weight"],
                         m_mean=d["m_mean"], m_var=d["m_var"])
    critic = Critic(collect("critic"), arrays["critic.obs_scale"], vn)
    return Checkpoint(actor, critic, meta)
