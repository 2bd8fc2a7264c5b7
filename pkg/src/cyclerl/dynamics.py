"""Reduced-order stochastic bicycle dynamics.

The model is an inverted-pendulum roll equation with steering-induced
centripetal coupling, a kinematic-bicycle yaw/position layer, and first-order
actuator lags for steering and drive speed.  Disturbances enter the roll rate
as an Euler-Maruyama diffusion term plus Poisson-timed jumps; a constant
slope adds a gravity bias.

All kernels accept scalars or equal-shaped numpy arrays, so the batched
environment and the single-bike API share one code path.  Dynamics math is
done in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81          # m/s^2
DELTA_MAX = 0.61        # rad, steering envelope (35 deg)
V_MAX = 6.0             # m/s, drive envelope
TAU_STEER = 0.05        # s, steering servo first-order lag
TAU_SPEED = 0.3         # s, hub motor speed lag
STEER_RATE_LIMIT = 7.0  # rad/s
CONTROL_DT = 0.02       # s, 50 Hz control tick


@dataclass
class PhysicalParams:
    """Physical parameter vector, nominal values from the 25 kg test platform."""

    m_total: float = 25.0        # kg
    h_com: float = 0.65          # m, CoM height
    wheelbase: float = 1.1       # m
    mu: float = 1.0              # tire friction coefficient
    actuator_gain: float = 1.0   # dimensionless steering-gain multiplier
    obs_noise_frac: float = 0.0  # rho, noise std as fraction of channel max
    g: float = GRAVITY           # m/s^2

    def validate(self) -> None:
        for name in ("m_total", "h_com", "wheelbase", "mu", "actuator_gain", "g"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"PhysicalParams.{name} must be strictly positive")
        if self.obs_noise_frac < 0.0:
            raise ValueError("PhysicalParams.obs_noise_frac must be >= 0")


@dataclass
class BikeState:
    """Continuous state of one bicycle."""

    phi: float = 0.0        # roll angle, rad
    phi_dot: float = 0.0    # roll rate, rad/s
    delta: float = 0.0      # steering angle, rad
    delta_dot: float = 0.0  # steering rate, rad/s
    v: float = 2.0          # forward speed, m/s
    psi: float = 0.0        # yaw angle, rad (unwrapped; wrap on read)
    x: float = 0.0          # m
    y: float = 0.0          # m
    t: float = 0.0          # s

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.phi, self.phi_dot, self.delta, self.delta_dot,
             self.v, self.psi, self.x, self.y, self.t],
            dtype=np.float64,
        )


STATE_FIELDS = ("phi", "phi_dot", "delta", "delta_dot", "v", "psi", "x", "y", "t")


@dataclass
class DisturbanceConfig:
    """Terrain / disturbance channels added on top of the deterministic drift."""

    diffusion_std: float = 0.0   # rad/s per sqrt(s), on roll rate
    jump_rate: float = 0.0       # Poisson events per second
    jump_std: float = 0.0        # rad/s per event, on roll rate
    slope_angle: float = 0.0     # rad, constant gravity bias
    enable_diffusion: bool = True
    enable_jumps: bool = True
    enable_slope: bool = True

    def validate(self) -> None:
        if self.diffusion_std < 0 or self.jump_std < 0 or self.jump_rate < 0:
            raise ValueError("disturbance magnitudes and rates must be >= 0")

    @property
    def eff_diffusion_std(self) -> float:
        return self.diffusion_std if self.enable_diffusion else 0.0

    @property
    def eff_jump_rate(self) -> float:
        return self.jump_rate if self.enable_jumps else 0.0

    @property
    def eff_jump_std(self) -> float:
        return self.jump_std if self.enable_jumps else 0.0

    @property
    def eff_slope(self) -> float:
        return self.slope_angle if self.enable_slope else 0.0


NO_DISTURBANCE = DisturbanceConfig()


@dataclass
class ActuatorCommand:
    """Targets handed to the steering servo and hub motor."""

    delta_target: float = 0.0  # rad, |.| <= DELTA_MAX
    v_target: float = 2.0      # m/s, in [0, V_MAX]

    def validate(self) -> None:
        if abs(self.delta_target) > DELTA_MAX + 1e-12:
            raise ValueError(f"|delta_target| must be <= {DELTA_MAX}")
        if not (0.0 <= self.v_target <= V_MAX + 1e-12):
            raise ValueError(f"v_target must be in [0, {V_MAX}]")


def wrap_heading(angle):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=np.float64), 2.0 * np.pi)


def action_to_targets(a0, a1):
    """Policy action channels in [-1, 1] -> (steering target rad, speed target m/s)."""
    return a0 * DELTA_MAX, (a1 + 1.0) * 0.5 * V_MAX


def targets_to_action(delta_target, v_target):
    """Inverse mapping, clamped into the action box."""
    a0 = np.clip(np.asarray(delta_target, dtype=np.float64) / DELTA_MAX, -1.0, 1.0)
    a1 = np.clip(2.0 * np.asarray(v_target, dtype=np.float64) / V_MAX - 1.0, -1.0, 1.0)
    return a0, a1


def _roll_accel(phi, delta, v, g, h, b, mu, slope):
    """Roll acceleration kernel; elementwise over arrays.

    phi_dd = (g/h) sin(phi) - (a_lat/h) cos(phi) + (g/h) sin(slope),
    with the steering-induced lateral acceleration a_lat = (v^2/b) tan(delta)
    clamped to +/- mu*g (friction-limited).
    """
    a_lat = np.clip(v * v * np.tan(delta) / b, -mu * g, mu * g)
    return (g * np.sin(phi) - a_lat * np.cos(phi) + g * np.sin(slope)) / h


def roll_acceleration(s: BikeState, p: PhysicalParams, dc: DisturbanceConfig = NO_DISTURBANCE) -> float:
    """Deterministic roll acceleration at the current state, rad/s^2."""
    p.validate()
    if abs(s.delta) >= np.pi / 2:
        raise ValueError("steering angle must satisfy |delta| < pi/2")
    return float(
        _roll_accel(s.phi, s.delta, s.v, p.g, p.h_com, p.wheelbase, p.mu, dc.eff_slope)
    )


def _kinematics(delta, v, psi, b):
    psi_dot = v * np.tan(delta) / b
    return psi_dot, v * np.cos(psi), v * np.sin(psi)


def kinematics_rates(s: BikeState, p: PhysicalParams) -> tuple[float, float, float]:
    """Yaw rate and planar velocity (psi_dot rad/s, x_dot m/s, y_dot m/s)."""
    if not p.wheelbase > 0:
        raise ValueError("wheelbase must be positive")
    psi_dot, x_dot, y_dot = _kinematics(s.delta, s.v, s.psi, p.wheelbase)
    return float(psi_dot), float(x_dot), float(y_dot)


def _actuator(delta, v, delta_target, v_target, gain, dt):
    """First-order actuator tracking with steering rate limit; elementwise."""
    goal = np.clip(gain * delta_target, -DELTA_MAX, DELTA_MAX)
    rate = np.clip((goal - delta) / TAU_STEER, -STEER_RATE_LIMIT, STEER_RATE_LIMIT)
    delta_next = np.clip(delta + rate * dt, -DELTA_MAX, DELTA_MAX)
    delta_dot_next = (delta_next - delta) / dt
    v_next = np.maximum(v + (v_target - v) * dt / TAU_SPEED, 0.0)
    return delta_next, delta_dot_next, v_next


def actuator_step(
    s: BikeState, cmd: ActuatorCommand, p: PhysicalParams, dt: float
) -> tuple[float, float, float]:
    """Advance steering and speed actuators one step -> (delta, delta_dot, v)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    d, dd, v = _actuator(s.delta, s.v, cmd.delta_target, cmd.v_target, p.actuator_gain, dt)
    return float(d), float(dd), float(v)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def integrate(
    s: BikeState,
    cmd: ActuatorCommand,
    p: PhysicalParams,
    dc: DisturbanceConfig = NO_DISTURBANCE,
    dt: float = CONTROL_DT,
    rng=None,
) -> BikeState:
    """One Euler-Maruyama step of length dt.

    Semi-implicit ordering: actuators first, then roll rate (drift + diffusion
    + jumps), then roll angle and pose from the updated rates.  Deterministic
    given (state, cmd, seed); with all disturbance channels zero it reduces to
    the plain drift integration.
    """
    if not (0.0 < dt <= 0.05):
        raise ValueError("dt must lie in (0, 0.05]")
    dc.validate()
    gen = _as_generator(rng)

    delta, delta_dot, v = actuator_step(s, cmd, p, dt)
    acc = _roll_accel(s.phi, delta, v, p.g, p.h_com, p.wheelbase, p.mu, dc.eff_slope)
    if abs(delta) >= np.pi / 2:
        raise ValueError("steering angle must satisfy |delta| < pi/2")

    # Fixed draw layout per step keeps trajectories seed-reproducible even
    # when channels toggle between runs.
    n_diff = gen.standard_normal()
    u_jump = gen.random()
    n_jump = gen.standard_normal()

    phi_dot = s.phi_dot + acc * dt + dc.eff_diffusion_std * np.sqrt(dt) * n_diff
    if u_jump < dc.eff_jump_rate * dt:
        phi_dot = phi_dot + dc.eff_jump_std * n_jump
    phi = s.phi + phi_dot * dt

    psi_dot, x_dot, y_dot = _kinematics(delta, v, s.psi, p.wheelbase)
    return BikeState(
        phi=float(phi),
        phi_dot=float(phi_dot),
        delta=delta,
        delta_dot=delta_dot,
        v=v,
        psi=float(s.psi + psi_dot * dt),
        x=float(s.x + x_dot * dt),
        y=float(s.y + y_dot * dt),
        t=s.t + dt,
    )


def simulate(
    s0: BikeState,
    cmd,
    p: PhysicalParams,
    dc: DisturbanceConfig = NO_DISTURBANCE,
    dt: float = CONTROL_DT,
    steps: int = 3200,
    seed=None,
) -> np.ndarray:
    """Roll out `steps` integration steps; returns (steps+1, 9) state rows.

    `cmd` is either a fixed ActuatorCommand or a callable (step_idx, state) ->
    ActuatorCommand.  One shared generator is drawn from in step order, so a
    seed pins the whole trajectory.
    """
    gen = _as_generator(seed)
    out = np.empty((steps + 1, len(STATE_FIELDS)), dtype=np.float64)
    out[0] = s0.as_array()
    s = s0
    for k in range(steps):
        c = cmd(k, s) if callable(cmd) else cmd
        s = integrate(s, c, p, dc, dt, rng=gen)
        out[k + 1] = s.as_array()
    return out


def linearize(p: PhysicalParams, v: float) -> tuple[np.ndarray, np.ndarray]:
    """Linearized roll/steer model around upright at speed v.

    State [phi, phi_dot, delta], input = steering target entering through the
    servo lag.  Returns (A 3x3, B 3x1).
    """
    if not v > 0:
        raise ValueError("linearization requires v > 0")
    g_h = p.g / p.h_com
    A = np.array(
        [
            [0.0, 1.0, 0.0],
            [g_h, 0.0, -v * v / (p.wheelbase * p.h_com)],
            [0.0, 0.0, -1.0 / TAU_STEER],
        ]
    )
    B = np.array([[0.0], [0.0], [1.0 / TAU_STEER]])
    return A, B
