"""Classical comparators: dual-loop PID with v^-2 gain scheduling and an LQR
with online Riccati solving.

Both emit the same 2-channel action interface as the learned policy and read
the true vehicle state (they are model-based controllers calibrated on the
nominal parameter set).  The steering channel of each controller is odd in
(phi, phi_dot, heading error, delta_cmd).

The CARE solver is a Kleinman-Newton iteration seeded by Ackermann pole
placement; each iterate solves a small Lyapunov equation through its
Kronecker form.  Convergence is declared on the residual
||A'P + PA - P B R^-1 B' P + Q||_inf.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import BikeState, PhysicalParams, linearize, targets_to_action, wrap_heading
from .env import CommandState


@dataclass(frozen=True)
class PidConfig:
    kp_base: float = 4.0        # tuned at v_ref (Ziegler-Nichols)
    kd_base: float = 0.4
    v_ref: float = 2.0          # m/s
    # Outer loop: roll reference = k_psi * v * heading_error.  Scaling by v
    # keeps the heading-loop crossover a fixed factor below the roll
    # resonance at every speed; a speed-independent gain is unstable for the
    # whole envelope once it is large enough to be useful.
    k_psi: float = 0.015        # rad lean per rad error per (m/s)
    phi_ref_limit: float = 0.15  # rad
    v_floor: float = 0.3        # m/s; bounds the v^-2 schedule
    delta_cmd_feedforward: bool = False


def pid_gains(v, cfg: PidConfig = PidConfig()):
    """K proportional to v^-2, anchored at (kp_base, kd_base) for v_ref."""
    scale = (cfg.v_ref / np.maximum(v, cfg.v_floor)) ** 2
    return cfg.kp_base * scale, cfg.kd_base * scale


def pid_action(phi, phi_dot, v, e_psi, v_cmd, delta_cmd, cfg: PidConfig = PidConfig()):
    """Vectorized dual-loop PID -> actions (..., 2) in [-1, 1]."""
    kp, kd = pid_gains(v, cfg)
    phi_ref = np.clip(cfg.k_psi * np.asarray(v) * e_psi,
                      -cfg.phi_ref_limit, cfg.phi_ref_limit)
    delta_target = kp * (phi - phi_ref) + kd * phi_dot
    if cfg.delta_cmd_feedforward:
        delta_target = delta_target + delta_cmd
    a0, a1 = targets_to_action(delta_target, v_cmd)
    return np.stack(np.broadcast_arrays(a0, a1), axis=-1)


def pid_control(s: BikeState, c: CommandState, cfg: PidConfig = PidConfig()):
    """Single-bike contract wrapper -> (a0, a1)."""
    e_psi = float(wrap_heading(c.psi_desired - s.psi))
    a = pid_action(s.phi, s.phi_dot, s.v, e_psi, c.v_cmd, c.delta_cmd, cfg)
    return float(a[0]), float(a[1])


# -- continuous algebraic Riccati equation ------------------------------------


def lyapunov_solve(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve A'P + PA + Q = 0 for symmetric P (Kronecker form; small n)."""
    n = A.shape[0]
    eye = np.eye(n)
    M = np.kron(eye, A.T) + np.kron(A.T, eye)
    p = np.linalg.solve(M, -Q.flatten(order="F"))
    P = p.reshape((n, n), order="F")
    return 0.5 * (P + P.T)


def ackermann_gain(A: np.ndarray, B: np.ndarray, poles) -> np.ndarray:
    """SISO pole placement K such that eig(A - BK) = poles."""
    n = A.shape[0]
    b = B.reshape(n, 1)
    ctrb = np.hstack([np.linalg.matrix_power(A, i) @ b for i in range(n)])
    chi = np.eye(n)
    for p in poles:
        chi = chi @ (A - p * np.eye(n))
    e_last = np.zeros((1, n))
    e_last[0, -1] = 1.0
    return (e_last @ np.linalg.solve(ctrb, chi)).reshape(n)


def care_residual(A, B, Q, R_inv, P) -> float:
    res = A.T @ P + P @ A - P @ B @ R_inv @ B.T @ P + Q
    return float(np.max(np.abs(res)))


def solve_care(A, B, Q, R, tol: float = 1e-9, max_iter: int = 60) -> np.ndarray:
    """Stabilizing solution of A'P + PA - P B R^-1 B' P + Q = 0.

    Kleinman-Newton from an Ackermann-placed stabilizing gain; raises
    RuntimeError if the residual does not reach tol within max_iter.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    B = np.asarray(B, dtype=np.float64).reshape(n, -1)
    if B.shape[1] != 1:
        raise ValueError("solve_care handles single-input systems")
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    R_inv = np.linalg.inv(R)

    # Hurwitz initialization: poles to the left of the open-loop spectrum.
    radius = max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
    poles = [-(1.5 + 0.5 * i) * radius for i in range(n)]
    K = ackermann_gain(A, B, poles).reshape(1, n)

    P = None
    for _ in range(max_iter):
        Acl = A - B @ K
        P = lyapunov_solve(Acl, Q + K.T @ R @ K)
        K = R_inv @ B.T @ P
        if care_residual(A, B, Q, R_inv, P) < tol:
            return P
    raise RuntimeError(f"CARE iteration did not reach tol={tol} in {max_iter} steps")


def lqr_gain(p: PhysicalParams, v: float, q_diag, r_scalar,
             tol: float = 1e-9, max_iter: int = 60) -> np.ndarray:
    A, B = linearize(p, v)
    Q = np.diag(q_diag)
    R = np.array([[r_scalar]])
    P = solve_care(A, B, Q, R, tol, max_iter)
    return (np.linalg.inv(R) @ B.T @ P).reshape(-1)


def equilibrium_roll(v_cmd, delta_cmd, wheelbase: float, g: float = 9.81):
    """Lean at which gravity balances the steady-turn centripetal pull.

    This is the roll angle where the roll acceleration vanishes for the held
    steering angle: tan(phi_eq) = v^2 tan(delta) / (b g).
    """
    return np.arctan(np.asarray(v_cmd) ** 2 * np.tan(delta_cmd) / (wheelbase * g))


@dataclass(frozen=True)
class LqrConfig:
    q_diag: tuple = (20.0, 6.0, 3.5)
    r: float = 1.5
    riccati_tol: float = 1e-9
    max_iter: int = 60
    v_recompute: float = 0.1   # m/s of speed drift before the gain is re-solved
    v_floor: float = 0.3       # below this, hold the last output
    v_grid: float = 0.05       # gains are solved on this speed grid and memoized


class LqrController:
    """Batched LQR with per-env gain caching and a shared solve memo."""

    def __init__(self, cfg: LqrConfig = LqrConfig(),
                 params: PhysicalParams | None = None, n: int = 1):
        self.cfg = cfg
        self.params = params if params is not None else PhysicalParams()
        self.degraded = False
        self._memo: dict = {}
        self.reset(n)

    def reset(self, n: int) -> None:
        self.n = n
        self.K = np.zeros((n, 3))
        self.v_cached = np.full(n, -np.inf)
        self.last_action = np.zeros((n, 2))
        self.last_action[:, 1] = -1.0

    def _gain_for(self, v: float) -> np.ndarray:
        key = round(max(v, self.cfg.v_floor) / self.cfg.v_grid)
        if key not in self._memo:
            v_solve = key * self.cfg.v_grid
            self._memo[key] = lqr_gain(self.params, v_solve, self.cfg.q_diag,
                                       self.cfg.r, self.cfg.riccati_tol,
                                       self.cfg.max_iter)
        return self._memo[key]

    def __call__(self, phi, phi_dot, delta, v, v_cmd, delta_cmd):
        phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
        phi_dot = np.atleast_1d(np.asarray(phi_dot, dtype=np.float64))
        delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        v_cmd = np.broadcast_to(np.asarray(v_cmd, dtype=np.float64), phi.shape)
        delta_cmd = np.broadcast_to(np.asarray(delta_cmd, dtype=np.float64), phi.shape)

        stale = np.abs(v - self.v_cached) > self.cfg.v_recompute
        for i in np.nonzero(stale)[0]:
            try:
                self.K[i] = self._gain_for(float(v[i]))
                self.v_cached[i] = v[i]
            except RuntimeError:
                self.degraded = True  # hold the previous gain

        phi_eq = equilibrium_roll(v_cmd, delta_cmd, self.params.wheelbase,
                                  self.params.g)
        err = np.stack([phi - phi_eq, phi_dot, delta - delta_cmd], axis=1)
        u = -(self.K * err).sum(axis=1)
        a0, a1 = targets_to_action(delta_cmd + u, v_cmd)
        action = np.stack([a0, a1], axis=1)

        low = v < self.cfg.v_floor
        if low.any():
            action[low] = self.last_action[low]
        self.last_action = action
        return action


def lqr_control(s: BikeState, c: CommandState, cfg: LqrConfig = LqrConfig(),
                p: PhysicalParams | None = None):
    """Single-bike contract wrapper -> (a0, a1).

    Steering commands are tracked through the equilibrium-roll mapping; the
    heading channel is not consumed here.
    """
    ctl = LqrController(cfg, p, n=1)
    a = ctl(s.phi, s.phi_dot, s.delta, s.v, c.v_cmd, c.delta_cmd)
    return float(a[0, 0]), float(a[0, 1])
