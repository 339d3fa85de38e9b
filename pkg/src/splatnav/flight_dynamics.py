"""Quadrotor rigid body driven by normalized attitude/thrust commands.

Control path per policy step: command latency (moving average over a
randomized history window) -> held actuator noise -> cascaded PID
(attitude angles -> body rates -> torques) -> semi-implicit Euler substeps.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import euler_zyx_from_quat, quat_integrate, quat_to_rot

GRAVITY = 9.81


class SimulationFault(RuntimeError):
    """Physics produced a non-finite state; the environment treats it as terminal."""


@dataclass
class DynamicsConfig:
    mass: float = 1.0                         # kg
    inertia: tuple = (0.01, 0.01, 0.02)       # body-frame diagonal, kg m^2
    drag: float = 0.1                         # linear drag coefficient, 1/s
    dt_sim: float = 0.004                     # physics step
    control_decimation: int = 5               # policy rate = dt_sim * decimation
    tilt_max_deg: float = 35.0
    yawrate_max_deg: float = 120.0
    thrust_gain: float = 0.5                  # thrust = m g (1 + cmd * gain)
    thrust_max: float = 25.0                  # N
    kp_ang: float = 8.0                       # angle error -> rate setpoint
    kp_rate: float = 0.2                      # rate error -> torque
    kd_rate: float = 0.004                    # derivative on measured rate

    @property
    def dt_ctrl(self) -> float:
        return self.dt_sim * self.control_decimation


@dataclass
class Action:
    """Normalized [thrust, roll, pitch, yaw-rate] commands, clamped to [-1, 1]."""

    thrust_cmd: float = 0.0
    roll_cmd: float = 0.0
    pitch_cmd: float = 0.0
    yaw_cmd: float = 0.0

    def __post_init__(self):
        self.thrust_cmd = float(np.clip(self.thrust_cmd, -1.0, 1.0))
        self.roll_cmd = float(np.clip(self.roll_cmd, -1.0, 1.0))
        self.pitch_cmd = float(np.clip(self.pitch_cmd, -1.0, 1.0))
        self.yaw_cmd = float(np.clip(self.yaw_cmd, -1.0, 1.0))

    def as_array(self) -> np.ndarray:
        return np.array([self.thrust_cmd, self.roll_cmd, self.pitch_cmd, self.yaw_cmd])

    @staticmethod
    def from_array(a) -> "Action":
        a = np.asarray(a, dtype=np.float64)
        return Action(a[0], a[1], a[2], a[3])


@dataclass
class QuadState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_action: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.orientation)

    def body_velocity(self) -> np.ndarray:
        return self.rotation().T @ self.velocity

    def copy(self) -> "QuadState":
        return QuadState(self.position.copy(), self.velocity.copy(),
                         self.orientation.copy(), self.angular_velocity.copy(),
                         self.last_action.copy())


class LatencyModel:
    """Moving-average command latency with randomized delay and held noise.

    Both the delay D and the additive action-noise vector are re-drawn every
    time the resample interval T elapses; T itself is re-drawn too.
    """

    def __init__(self, rng: np.random.Generator,
                 delay_range_ms=(0.0, 80.0),
                 resample_range_ms=(10.0, 100.0),
                 noise_sigma: float = 0.05,
                 enabled: bool = True):
        self.rng = rng
        self.delay_range_ms = delay_range_ms
        self.resample_range_ms = resample_range_ms
        self.noise_sigma = noise_sigma
        self.enabled = enabled
        self.history: deque[np.ndarray] = deque(maxlen=64)
        self.time_since_resample = 0.0
        self._resample()

    def _resample(self):
        if self.enabled:
            self.delay_ms = float(self.rng.uniform(*self.delay_range_ms))
            self.resample_interval_ms = float(self.rng.uniform(*self.resample_range_ms))
            self.noise = self.rng.normal(0.0, self.noise_sigma, size=4) \
                if self.noise_sigma > 0 else np.zeros(4)
        else:
            self.delay_ms = 0.0
            self.resample_interval_ms = math.inf
            self.noise = np.zeros(4)
        self.time_since_resample = 0.0

    def reset(self):
        self.history.clear()
        self._resample()

    def effective_action(self, raw: Action, dt_ctrl: float) -> Action:
        """Push raw and return the mean of commands issued within the last D ms."""
        if dt_ctrl <= 0:
            raise ValueError("dt_ctrl must be positive")
        self.history.append(raw.as_array())
        n = max(1, math.ceil(self.delay_ms / 1000.0 / dt_ctrl - 1e-9))
        n = min(n, len(self.history))
        window = list(self.history)[-n:]
        out = Action.from_array(np.mean(window, axis=0))
        self.time_since_resample += dt_ctrl * 1000.0
        if self.time_since_resample >= self.resample_interval_ms:
            self._resample()
        return out

    def add_action_noise(self, a: Action) -> Action:
        """Add the held noise sample (re-drawn at resample events), then clamp."""
        return Action.from_array(a.as_array() + self.noise)


@dataclass
class PidController:
    """Cascaded PID internals: derivative-on-measurement needs the last rate."""

    prev_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def reset(self):
        self.prev_rate = np.zeros(3)


def pid_step(state: QuadState, a: Action, dt: float,
             cfg: DynamicsConfig, ctrl: PidController) -> tuple[float, np.ndarray]:
    """Map a normalized action to collective thrust (N) and body torque (N m)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tilt_max = math.radians(cfg.tilt_max_deg)
    yawrate_max = math.radians(cfg.yawrate_max_deg)

    roll_sp = a.roll_cmd * tilt_max
    pitch_sp = a.pitch_cmd * tilt_max
    yawrate_sp = a.yaw_cmd * yawrate_max
    thrust = cfg.mass * GRAVITY * (1.0 + a.thrust_cmd * cfg.thrust_gain)
    thrust = float(np.clip(thrust, 0.0, cfg.thrust_max))

    roll, pitch, _ = euler_zyx_from_quat(state.orientation)
    rate_sp = np.array([
        cfg.kp_ang * (roll_sp - roll),
        cfg.kp_ang * (pitch_sp - pitch),
        yawrate_sp,
    ])
    omega = state.angular_velocity
    d_omega = (omega - ctrl.prev_rate) / dt
    ctrl.prev_rate = omega.copy()
    torque = cfg.kp_rate * (rate_sp - omega) - cfg.kd_rate * d_omega
    return thrust, torque


def integrate(state: QuadState, thrust: float, torque: np.ndarray, dt: float,
              cfg: DynamicsConfig) -> QuadState:
    """Semi-implicit Euler step of the 6-DOF rigid body."""
    if not 0.0 < dt <= 0.02:
        raise ValueError("dt must be in (0, 0.02]")
    inertia = np.asarray(cfg.inertia)
    omega = state.angular_velocity

    def omega_dot(w):
        return (torque - np.cross(w, inertia * w)) / inertia

    # midpoint step: explicit Euler drifts rotational energy by ~8% over
    # 1000 torque-free steps at this dt, midpoint stays well under 1%
    omega_mid = omega + 0.5 * dt * omega_dot(omega)
    omega_new = omega + dt * omega_dot(omega_mid)
    q_new = quat_integrate(state.orientation, omega_new, dt)

    R = quat_to_rot(q_new)
    accel = (np.array([0.0, 0.0, -GRAVITY])
             + R @ np.array([0.0, 0.0, thrust]) / cfg.mass
             - cfg.drag * state.velocity)
    v_new = state.velocity + dt * accel
    p_new = state.position + dt * v_new

    new = QuadState(p_new, v_new, q_new, omega_new, state.last_action.copy())
    if not (np.all(np.isfinite(p_new)) and np.all(np.isfinite(v_new))
            and np.all(np.isfinite(q_new)) and np.all(np.isfinite(omega_new))):
        raise SimulationFault("non-finite rigid-body state")
    return new


class Quadrotor:
    """One drone: rigid-body state plus its PID and latency internals."""

    def __init__(self, cfg: DynamicsConfig, rng: np.random.Generator,
                 latency_enabled: bool = True, action_noise_sigma: float = 0.05,
                 delay_range_ms=(0.0, 80.0), resample_range_ms=(10.0, 100.0)):
        self.cfg = cfg
        self.state = QuadState()
        self.ctrl = PidController()
        self.latency = LatencyModel(rng, delay_range_ms, resample_range_ms,
                                    action_noise_sigma, enabled=latency_enabled)

    def reset(self, state: QuadState):
        self.state = state
        self.ctrl.reset()
        self.latency.reset()

    def step(self, action: Action) -> QuadState:
        """Advance one control period: latency -> noise -> PID -> physics substeps."""
        eff = self.latency.effective_action(action, self.cfg.dt_ctrl)
        eff = self.latency.add_action_noise(eff)
        for _ in range(self.cfg.control_decimation):
            thrust, torque = pid_step(self.state, eff, self.cfg.dt_sim,
                                      self.cfg, self.ctrl)
            self.state = integrate(self.state, thrust, torque, self.cfg.dt_sim, self.cfg)
        self.state.last_action = action.as_array()[:3].copy()
        return self.state
