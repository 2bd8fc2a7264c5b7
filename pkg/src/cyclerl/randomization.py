"""Domain randomization: per-episode sampling of physics, initial state,
commands, and (opt-in) terrain.

Variables are drawn in a fixed order with a fixed draw count regardless of
which groups are enabled, so toggling one group never shifts another group's
samples under the same seed.  Disabled groups fall back to nominal values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import BikeState, DisturbanceConfig, PhysicalParams

DEG = math.pi / 180.0

# Nominal fallbacks used when a randomization group is disabled.
NOMINAL_V_INIT = 2.0
NOMINAL_V_CMD = 2.0
NOMINAL_RESAMPLE_INTERVAL = 4.0
WHEEL_RADIUS = 0.35  # m, drive wheel (hub velocity bookkeeping only)


@dataclass(frozen=True)
class VariableRange:
    """Uniform sampling range with a nominal fallback."""

    lo: float
    hi: float
    nominal: float

    def validate(self, name: str) -> None:
        if self.lo > self.hi:
            raise ValueError(f"randomization range for {name} has min > max")

    def sample(self, u: float) -> float:
        """Map a uniform draw u in [0, 1) into the range."""
        return self.lo + (self.hi - self.lo) * u

    @classmethod
    def fixed(cls, value: float) -> "VariableRange":
        return cls(value, value, value)


@dataclass(frozen=True)
class TerrainRanges:
    """Opt-in terrain sampling used during training when the group is enabled."""

    diffusion_std: VariableRange = VariableRange(0.0, 0.25, 0.0)
    jump_rate: VariableRange = VariableRange(0.0, 0.5, 0.0)
    jump_std: VariableRange = VariableRange(0.0, 0.3, 0.0)
    slope_angle: VariableRange = VariableRange(-0.087, 0.087, 0.0)


@dataclass(frozen=True)
class RandomizationSpec:
    """Per-variable ranges plus independently togglable groups."""

    dynamics_on: bool = True
    initial_on: bool = True
    task_on: bool = True
    terrain_on: bool = False

    # dynamics group
    m_total: VariableRange = VariableRange(15.0, 45.0, 25.0)        # kg
    h_com: VariableRange = VariableRange(0.50, 0.80, 0.65)          # m
    mu: VariableRange = VariableRange(0.5, 1.2, 1.0)
    actuator_gain: VariableRange = VariableRange(0.9, 1.1, 1.0)
    obs_noise_frac: VariableRange = VariableRange(0.01, 0.20, 0.0)  # rho

    # initial-state group
    v_init: VariableRange = VariableRange(1.0, 2.5, NOMINAL_V_INIT)            # m/s
    phi_init: VariableRange = VariableRange(-10 * DEG, 10 * DEG, 0.0)          # rad
    delta_init: VariableRange = VariableRange(-20 * DEG, 20 * DEG, 0.0)        # rad
    hub_omega_init: VariableRange = VariableRange(0.0, 3.0, 0.0)               # rad/s

    # task / command group
    v_cmd: VariableRange = VariableRange(1.0, 5.0, NOMINAL_V_CMD)              # m/s
    delta_cmd: VariableRange = VariableRange(-10 * DEG, 10 * DEG, 0.0)         # rad
    resample_interval: VariableRange = VariableRange(3.0, 5.0, NOMINAL_RESAMPLE_INTERVAL)

    terrain: TerrainRanges = field(default_factory=TerrainRanges)

    # Names in fixed draw order; the sampler always consumes one uniform per
    # entry so group toggles cannot shift later draws.
    TABLE_VARIABLES = (
        "m_total", "h_com", "mu", "actuator_gain", "obs_noise_frac",
        "v_init", "phi_init", "delta_init", "hub_omega_init",
        "v_cmd", "delta_cmd", "resample_interval",
    )
    GROUPS = {
        "dynamics": ("m_total", "h_com", "mu", "actuator_gain", "obs_noise_frac"),
        "initial": ("v_init", "phi_init", "delta_init", "hub_omega_init"),
        "task": ("v_cmd", "delta_cmd", "resample_interval"),
    }

    def validate(self) -> None:
        for name in self.TABLE_VARIABLES:
            getattr(self, name).validate(name)
        for name in ("diffusion_std", "jump_rate", "jump_std", "slope_angle"):
            getattr(self.terrain, name).validate(f"terrain.{name}")

    @classmethod
    def full(cls) -> "RandomizationSpec":
        """All table groups enabled at their default ranges (terrain stays opt-in)."""
        return cls()

    @classmethod
    def nominal(cls) -> "RandomizationSpec":
        return cls(dynamics_on=False, initial_on=False, task_on=False, terrain_on=False)

    def with_groups(self, *, dynamics=None, initial=None, task=None, terrain=None):
        kw = {}
        if dynamics is not None:
            kw["dynamics_on"] = dynamics
        if initial is not None:
            kw["initial_on"] = initial
        if task is not None:
            kw["task_on"] = task
        if terrain is not None:
            kw["terrain_on"] = terrain
        return replace(self, **kw)

    def group_enabled(self, name: str) -> bool:
        return {
            "dynamics": self.dynamics_on,
            "initial": self.initial_on,
            "task": self.task_on,
            "terrain": self.terrain_on,
        }[name]


# Draws consumed by one reset: 12 table variables + 4 terrain variables.
RESET_DRAWS = 16

TERRAIN_VARIABLES = ("diffusion_std", "jump_rate", "jump_std", "slope_angle")


def sample_reset_values(spec: RandomizationSpec, u: np.ndarray) -> dict:
    """Turn RESET_DRAWS uniforms into the per-episode value dict."""
    spec.validate()
    values = {}
    i = 0
    for group, names in RandomizationSpec.GROUPS.items():
        enabled = spec.group_enabled(group)
        for name in names:
            rng_spec: VariableRange = getattr(spec, name)
            values[name] = rng_spec.sample(u[i]) if enabled else rng_spec.nominal
            i += 1
    for name in TERRAIN_VARIABLES:
        rng_spec = getattr(spec.terrain, name)
        values[name] = rng_spec.sample(u[i]) if spec.terrain_on else rng_spec.nominal
        i += 1
    return values


def reset_rng(seed: int, env_index: int, episode_index: int) -> np.random.Generator:
    """Independent per-(env, episode) stream."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(env_index, episode_index))
    )


def sample_reset(
    spec: RandomizationSpec, rng
) -> tuple[BikeState, PhysicalParams, "CommandState", DisturbanceConfig, dict]:
    """Sample one episode's initial state, params, commands, and terrain.

    `rng` is a Generator or a seed.  Returns the raw value dict as the last
    element so conformance checks can see every sampled variable (including
    hub_omega_init, which has no counterpart in the reduced no-slip state and
    is recorded only).
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    u = gen.random(RESET_DRAWS)
    values = sample_reset_values(spec, u)

    state = BikeState(
        phi=values["phi_init"],
        phi_dot=0.0,
        delta=values["delta_init"],
        delta_dot=0.0,
        v=values["v_init"],
        psi=0.0,
        x=0.0,
        y=0.0,
        t=0.0,
    )
    params = PhysicalParams(
        m_total=values["m_total"],
        h_com=values["h_com"],
        mu=values["mu"],
        actuator_gain=values["actuator_gain"],
        obs_noise_frac=values["obs_noise_frac"],
    )
    from .env import CommandState  # local import to avoid a cycle

    commands = CommandState(
        v_cmd=values["v_cmd"],
        delta_cmd=values["delta_cmd"],
        next_resample_t=values["resample_interval"],
        psi_desired=0.0,
    )
    terrain = DisturbanceConfig(
        diffusion_std=values["diffusion_std"],
        jump_rate=values["jump_rate"],
        jump_std=values["jump_std"],
        slope_angle=values["slope_angle"],
    )
    return state, params, commands, terrain, values
