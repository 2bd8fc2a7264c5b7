"""Fixed-topology MLP with ELU activations, hand-written reverse-mode
gradients, Adam, and a cosine learning-rate schedule.

Parameters are float32 throughout.  All update functions are functional:
they return fresh parameter objects, which also makes stale-cache detection
trivial (a cache is only valid for the exact parameter object it came from).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

_uid_counter = itertools.count()


class TrainingFault(RuntimeError):
    """Raised when non-finite values reach an update boundary."""


@dataclass(frozen=True)
class Topology:
    input_dim: int
    hidden: tuple
    output_dim: int

    @property
    def layer_sizes(self) -> list:
        return [self.input_dim, *self.hidden, self.output_dim]


class Mlp:
    """Weight/bias stacks for a dense ELU network with a linear output layer."""

    def __init__(self, weights: list, biases: list):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and congruent")
        for w, b in zip(weights, biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias shape does not match weight columns")
        self.weights = [np.asarray(w, dtype=np.float32) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float32) for b in biases]
        self.uid = next(_uid_counter)

    @property
    def topology(self) -> Topology:
        hidden = tuple(w.shape[1] for w in self.weights[:-1])
        return Topology(self.weights[0].shape[0], hidden, self.weights[-1].shape[1])

    def param_list(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_param_list(cls, params: list) -> "Mlp":
        return cls(params[0::2], params[1::2])


def orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    a = rng.standard_normal(shape)
    flat = a if shape[0] >= shape[1] else a.T
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return (gain * q[: shape[0], : shape[1]]).astype(np.float32)


def init_mlp(topology: Topology, rng, out_gain: float = 1.0) -> Mlp:
    """Orthogonal init, sqrt(2) gain on hidden layers, out_gain on the head."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sizes = topology.layer_sizes
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        gain = math.sqrt(2.0) if i < len(sizes) - 2 else out_gain
        weights.append(orthogonal(gen, (sizes[i], sizes[i + 1]), gain))
        biases.append(np.zeros(sizes[i + 1], dtype=np.float32))
    return Mlp(weights, biases)


def elu(x):
    # expm1 only sees the negative branch (np.where evaluates both sides)
    return np.where(x >= 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x >= 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class ForwardCache:
    mlp_uid: int
    x: np.ndarray            # (B, in)
    pre_acts: list           # z per layer, (B, width)
    activations: list        # inputs to each layer, (B, width)


def forward(mlp: Mlp, x) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; accepts (in,) or (B, in)."""
    x = np.asarray(x, dtype=np.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != mlp.topology.input_dim:
        raise ValueError(
            f"input dim {x.shape[1]} does not match topology {mlp.topology.input_dim}"
        )
    h = x
    pre_acts, activations = [], []
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        activations.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = z if i == last else elu(z)
    cache = ForwardCache(mlp.uid, x, pre_acts, activations)
    return (h[0] if squeeze else h), cache


@dataclass
class GradientBundle:
    d_weights: list
    d_biases: list

    def param_grads(self) -> list:
        out = []
        for dw, db in zip(self.d_weights, self.d_biases):
            out.extend((dw, db))
        return out

    @property
    def global_norm(self) -> float:
        return global_norm(self.param_grads())


def backward(mlp: Mlp, cache: ForwardCache, output_grad) -> GradientBundle:
    """Reverse-mode gradients of sum(output * output_grad) w.r.t. parameters."""
    if cache.mlp_uid != mlp.uid:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = np.asarray(output_grad, dtype=np.float32)
    if g.ndim == 1:
        g = g[None, :]
    d_weights = [None] * len(mlp.weights)
    d_biases = [None] * len(mlp.biases)
    dz = g
    for i in range(len(mlp.weights) - 1, -1, -1):
        d_weights[i] = cache.activations[i].T @ dz
        d_biases[i] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ mlp.weights[i].T
            dz = dh * elu_grad(cache.pre_acts[i - 1])
    return GradientBundle(d_weights, d_biases)


def global_norm(arrays: list) -> float:
    return math.sqrt(sum(float(np.sum(np.square(a.astype(np.float64)))) for a in arrays))


def clip_global_norm(arrays: list, max_norm: float) -> tuple[list, float]:
    norm = global_norm(arrays)
    if norm <= max_norm or norm == 0.0:
        return arrays, norm
    scale = np.float32(max_norm / norm)
    return [a * scale for a in arrays], norm


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params: list, grads: list, state: AdamState, lr: float
              ) -> tuple[list, AdamState]:
    """Bias-corrected Adam over a parameter list; functional."""
    if len(params) != len(grads):
        raise ValueError("params and grads must be congruent")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError("params and grads must be congruent")
        if not np.all(np.isfinite(g)):
            raise TrainingFault("non-finite gradient")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(np.float32)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, eps)


def cosine_lr(step: int, total_steps: int, lr0: float, floor_ratio: float = 0.1) -> float:
    """Cosine annealing from lr0 down to floor_ratio * lr0."""
    if not (0 <= step <= total_steps):
        raise ValueError("step must lie in [0, total_steps]")
    lr_min = floor_ratio * lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# -- diagonal Gaussian head ----------------------------------------------------

LOG_2PI = math.log(2.0 * math.pi)


def clamp_log_std(log_std):
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def gaussian_log_prob(mean, log_std, x) -> np.ndarray:
    """Diagonal Gaussian log density; sums over the trailing axis."""
    log_std = clamp_log_std(np.asarray(log_std, dtype=np.float64))
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z = (x - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * x.shape[-1] * LOG_2PI


def gaussian_entropy(log_std, dim_batch: int = 1) -> float:
    log_std = clamp_log_std(np.asarray(log_std, dtype=np.float64))
    return float(np.sum(log_std) + 0.5 * log_std.shape[-1] * (1.0 + LOG_2PI))


def gaussian_policy_head(mean, log_std, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample pre-clamp actions and their exact log density.

    Callers clamp the action into [-1, 1] afterwards; the density is of the
    unclamped draw.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mean = np.asarray(mean, dtype=np.float64)
    log_std = clamp_log_std(np.asarray(log_std, dtype=np.float64))
    noise = gen.standard_normal(mean.shape)
    raw = mean + np.exp(log_std) * noise
    return raw, gaussian_log_prob(mean, log_std, raw)
