"""Gym-style vectorized environment bindings for the splatnav simulator.

This layer only marshals data across the API boundary: every numeric output
(observations, rewards, termination causes) is produced engine-side by
``splatnav.config.make_vec_env`` and ``VecNavEnv.step_batch``. Arrays coming
back from the engine are handed to the caller without per-pixel copying;
batching them into a single (N, ...) array is one bulk stack per step.

A handle is not shareable across concurrent callers: one ``step`` in flight
at a time, with any parallelism happening inside the engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import splatnav
from splatnav.config import EngineConfig, make_vec_env
from splatnav.flight_dynamics import Action
from splatnav.nav_env import (TERM_COLLISION, TERM_CRASH_Z, TERM_FAULT,
                              TERM_SUCCESS, TERM_TIMEOUT)

__all__ = ["API_VERSION", "BoxSpace", "NavGymEnv", "VecEnvHandle", "make"]

#: Engine API version this binding was built against; ``make`` refuses to run
#: against an engine reporting a different version.
API_VERSION = "1.0"

_TERMINAL = frozenset({TERM_CRASH_Z, TERM_COLLISION, TERM_SUCCESS, TERM_FAULT})


@dataclass(frozen=True)
class BoxSpace:
    """Minimal gym-style box descriptor: shape plus inclusive bounds."""

    shape: tuple[int, ...]
    low: float
    high: float
    dtype: str = "float64"

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x)
        return (x.shape == self.shape and np.all(np.isfinite(x))
                and bool(np.all(x >= self.low)) and bool(np.all(x <= self.high)))


class VecEnvHandle:
    """N engine environments behind a vectorized gym-style interface.

    ``step`` follows the standard vectorized-env convention: an episode that
    ends is auto-reset engine-side, the returned observation is the first of
    the new episode, and ``info["reset"]`` is True for that slot.
    ``terminated`` covers crash/collision/success (and simulation faults),
    ``truncated`` covers the step-limit timeout.
    """

    def __init__(self, vec):
        self._vec = vec
        env = vec.envs[0]
        cam = env.camera
        self.observation_space = {
            "rgb": BoxSpace((cam.height, cam.width, 3), 0.0, 1.0),
            "state": BoxSpace((20,), -np.inf, np.inf),
        }
        if env.privileged:
            self.observation_space["depth"] = BoxSpace(
                (cam.height, cam.width), 0.0, np.inf)
        self.action_space = BoxSpace((4,), -1.0, 1.0)

    @property
    def n_envs(self) -> int:
        return self._vec.n_envs

    def reset(self) -> dict[str, np.ndarray]:
        return self._batch_obs(self._vec.reset())

    def step(self, actions: np.ndarray
             ) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray,
                        np.ndarray, list[dict]]:
        acts = np.asarray(actions, dtype=np.float64)
        if acts.shape != (self.n_envs, 4):
            raise ValueError(
                f"actions must have shape ({self.n_envs}, 4), got {acts.shape}")
        if not np.all(np.isfinite(acts)):
            raise ValueError("actions must be finite")
        obs, rewards, terms, infos = self._vec.step_batch(
            [Action.from_array(row) for row in acts])
        terminated = np.array([t in _TERMINAL for t in terms])
        truncated = np.array([t == TERM_TIMEOUT for t in terms])
        return self._batch_obs(obs), rewards, terminated, truncated, infos

    def kinematics(self) -> list[dict[str, list[float]]]:
        """Raw simulator kinematics per environment, for trajectory logging.

        After ``step`` this reflects any auto-reset, i.e. it matches the
        environment that produced the returned observation.
        """
        out = []
        for env in self._vec.envs:
            s = env.quad.state
            out.append({"position": list(s.position),
                        "velocity": list(s.velocity),
                        "quaternion": list(s.orientation)})
        return out

    def _batch_obs(self, obs) -> dict[str, np.ndarray]:
        out = {"rgb": np.stack([o.rgb for o in obs]),
               "state": np.stack([o.state for o in obs])}
        if "depth" in self.observation_space:
            out["depth"] = np.stack([o.depth for o in obs])
        return out


class NavGymEnv:
    """Single-environment gym-compatible wrapper around a one-env handle."""

    def __init__(self, handle: VecEnvHandle):
        if handle.n_envs != 1:
            raise ValueError("NavGymEnv wraps exactly one environment")
        self._handle = handle
        self.observation_space = handle.observation_space
        self.action_space = handle.action_space

    def reset(self) -> tuple[dict[str, np.ndarray], dict]:
        obs = self._handle.reset()
        return {k: v[0] for k, v in obs.items()}, {}

    def step(self, action: np.ndarray
             ) -> tuple[dict[str, np.ndarray], float, bool, bool, dict]:
        obs, rewards, terminated, truncated, infos = self._handle.step(
            np.asarray(action, dtype=np.float64)[None, :])
        return ({k: v[0] for k, v in obs.items()}, float(rewards[0]),
                bool(terminated[0]), bool(truncated[0]), infos[0])


def make(config_path: str, n_envs: int = 1, seed: int = 0,
         privileged: bool | None = None) -> VecEnvHandle:
    """Build N engine environments from a config file.

    Engine configuration errors propagate unchanged so the caller sees the
    engine's own message (including the offending path for a missing file).
    """
    if splatnav.API_VERSION != API_VERSION:
        raise RuntimeError(
            f"engine API version {splatnav.API_VERSION} does not match "
            f"binding API version {API_VERSION}")
    cfg = EngineConfig.load(config_path)
    return VecEnvHandle(make_vec_env(cfg, n_envs, seed, privileged))
