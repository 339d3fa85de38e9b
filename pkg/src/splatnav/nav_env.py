"""Goal-reaching navigation environment around the splat renderer.

Each environment owns one quadrotor, a shared read-only scene and occupancy
map, per-episode visual randomization (colors, FOV), correlated perception
noise on the observed state, the composite reward, and the termination rules.
A vectorized wrapper steps N environments and batches their renders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .flight_dynamics import (Action, DynamicsConfig, Quadrotor, QuadState,
                              SimulationFault)
from .geometry import quat_from_yaw, rot_to_quat
from .rasterizer import CameraModel, Pose, render_batch
from .splat_scene import (ColorRandomization, GaussianCloud,
                          extract_point_cloud, randomize_colors)

TERM_RUNNING = "running"
TERM_CRASH_Z = "crash_z"
TERM_COLLISION = "collision"
TERM_SUCCESS = "success"
TERM_TIMEOUT = "timeout"
TERM_FAULT = "fault"

# camera mounted body-forward: optical axis = body x (FLU body frame)
_CAM_FROM_BODY = np.array([[0.0, -1.0, 0.0],
                           [0.0, 0.0, -1.0],
                           [1.0, 0.0, 0.0]])


@dataclass
class RewardWeights:
    collision: float = -80.0
    z_velocity: float = -0.5
    action_magnitude: float = -0.3
    action_change: float = -0.6
    distance: float = 30.0
    success: float = 80.0
    velocity_excess: float = -1.0


@dataclass
class EpisodeConfig:
    goal: np.ndarray = field(default_factory=lambda: np.array([3.0, 0.0, 1.0]))
    start_min: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0, 0.8]))
    start_max: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 1.2]))
    z_range: tuple = (0.1, 1.7)
    v_max: float = 2.0
    reach_radius: float = 0.3
    max_steps: int = 512
    weights: RewardWeights = field(default_factory=RewardWeights)
    normalize_state: bool = False


@dataclass
class RandomizationConfig:
    enabled: bool = True
    action_noise_sigma: float = 0.05
    delay_range_ms: tuple = (0.0, 80.0)
    resample_range_ms: tuple = (10.0, 100.0)
    ou_theta: float = 0.1
    vel_noise_sigma: float = 0.08
    dir_noise_sigma: float = 0.05
    z_noise_sigma: float = 0.03
    color_alpha_range: tuple = (0.8, 1.3)
    color_beta_range: tuple = (-0.05, 0.05)
    color_noise_sigma: float = 0.025
    fov_range: tuple = (67.0, 106.0)

    def disabled(self) -> "RandomizationConfig":
        return RandomizationConfig(
            enabled=False, action_noise_sigma=0.0,
            ou_theta=self.ou_theta, vel_noise_sigma=0.0,
            dir_noise_sigma=0.0, z_noise_sigma=0.0, color_noise_sigma=0.0)


@dataclass
class EnvObservation:
    rgb: np.ndarray                 # (H, W, 3) in [0, 1]
    state: np.ndarray               # (20,)
    depth: np.ndarray | None = None  # (H, W) meters, privileged only


class OuNoise:
    """Mean-reverting noise: n <- (1 - theta) n + N(0, sigma^2), per channel."""

    def __init__(self, sigmas: np.ndarray, theta: float = 0.1):
        if not 0.0 < theta < 1.0:
            raise ValueError("theta must be in (0, 1)")
        self.theta = theta
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        self.state = np.zeros_like(self.sigmas)

    def reset(self):
        self.state = np.zeros_like(self.sigmas)

    def step(self, rng: np.random.Generator) -> np.ndarray:
        noise = rng.normal(0.0, 1.0, size=self.sigmas.shape) * self.sigmas
        self.state = (1.0 - self.theta) * self.state + noise
        return self.state


class OccupancyMap:
    """Dense voxel grid marked within an inflation radius of any input point.

    A voxel is marked iff its center lies within inflation + half the voxel
    diagonal of some point, which conservatively covers every inflated ball.
    """

    def __init__(self, points: np.ndarray, voxel: float = 0.1,
                 inflation: float = 0.2, outside_occupied: bool = False):
        if inflation < 0:
            raise ValueError("inflation must be >= 0")
        self.voxel = voxel
        self.inflation = inflation
        self.outside_occupied = outside_occupied
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.reach = inflation + voxel * math.sqrt(3.0) / 2.0
        if points.shape[0] == 0:
            self.origin = np.zeros(3)
            self.shape = (0, 0, 0)
            self.grid = np.zeros((0, 0, 0), dtype=bool)
            return
        margin = self.reach + voxel
        self.origin = points.min(axis=0) - margin
        upper = points.max(axis=0) + margin
        self.shape = tuple(np.ceil((upper - self.origin) / voxel).astype(int) + 1)
        self.grid = np.zeros(self.shape, dtype=bool)

        r = int(math.ceil(self.reach / voxel)) + 1
        offs = np.stack(np.meshgrid(*[np.arange(-r, r + 1)] * 3, indexing="ij"),
                        axis=-1).reshape(-1, 3)
        for chunk in np.array_split(points, max(1, len(points) // 2048)):
            base = np.floor((chunk - self.origin) / voxel).astype(int)
            idx = base[:, None, :] + offs[None, :, :]
            centers = self.origin + (idx + 0.5) * voxel
            d = np.linalg.norm(centers - chunk[:, None, :], axis=2)
            hit = idx[d <= self.reach]
            ok = np.all((hit >= 0) & (hit < np.array(self.shape)), axis=1)
            hit = hit[ok]
            self.grid[hit[:, 0], hit[:, 1], hit[:, 2]] = True

    def query(self, position: np.ndarray) -> bool:
        """True if the voxel containing position is occupied."""
        if self.grid.size == 0:
            return self.outside_occupied
        idx = np.floor((np.asarray(position) - self.origin) / self.voxel).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            return self.outside_occupied
        return bool(self.grid[idx[0], idx[1], idx[2]])


def build_occupancy(points, voxel: float = 0.1, inflation: float = 0.2,
                    outside_occupied: bool = False) -> OccupancyMap:
    return OccupancyMap(points, voxel, inflation, outside_occupied)


class RunningNorm:
    """Welford running mean/variance normalizer, freezable for evaluation."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.frozen = False

    def update(self, x: np.ndarray):
        if self.frozen:
            return
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return x
        std = np.sqrt(self.m2 / (self.count - 1))
        return (x - self.mean) / np.maximum(std, 1e-6)

    def freeze(self):
        self.frozen = True


def compute_reward(prev: QuadState, cur: QuadState, a_t: np.ndarray,
                   a_prev: np.ndarray, events: dict, goal: np.ndarray,
                   weights: RewardWeights, v_max: float, dt: float
                   ) -> tuple[float, dict]:
    """Weighted composite reward; returns (r_t, per-component contributions)."""
    w = weights
    d_prev = float(np.linalg.norm(goal - prev.position))
    d_cur = float(np.linalg.norm(goal - cur.position))
    d_step = v_max * dt
    v_bz = abs(float(cur.body_velocity()[2]))
    speed = float(np.linalg.norm(cur.velocity))
    da = np.asarray(a_t)[:3] - np.asarray(a_prev)[:3]

    breakdown = {
        "collision": w.collision * (1.0 if events.get("collision") else 0.0),
        "z_velocity": w.z_velocity * min(v_bz, 1.0),
        "action_magnitude": w.action_magnitude * float(np.dot(a_t[:3], a_t[:3])),
        "action_change": w.action_change * float(np.dot(da, da)),
        "distance": w.distance * float(np.clip(d_prev - d_cur, -d_step, d_step)),
        "success": w.success * (1.0 if events.get("success") else 0.0),
        "velocity_excess": w.velocity_excess * (
            min(math.exp(speed - v_max) - 1.0, 5.0) if speed > v_max else 0.0),
    }
    return sum(breakdown.values()), breakdown


def check_termination(quad: QuadState, cfg: EpisodeConfig,
                      occ: OccupancyMap, step_count: int) -> str:
    """Pure termination decision; precedence crash_z > collision > success > timeout."""
    z = quad.position[2]
    if not cfg.z_range[0] <= z <= cfg.z_range[1]:
        return TERM_CRASH_Z
    if occ.query(quad.position):
        return TERM_COLLISION
    if np.linalg.norm(quad.position - cfg.goal) <= cfg.reach_radius:
        return TERM_SUCCESS
    if step_count >= cfg.max_steps:
        return TERM_TIMEOUT
    return TERM_RUNNING


class NavEnv:
    """One navigation environment instance over a shared immutable scene."""

    def __init__(self, cloud: GaussianCloud, cfg: EpisodeConfig,
                 rng: np.random.Generator,
                 dyn_cfg: DynamicsConfig | None = None,
                 rand_cfg: RandomizationConfig | None = None,
                 camera: CameraModel | None = None,
                 occupancy: OccupancyMap | None = None,
                 collision_points: np.ndarray | None = None,
                 privileged: bool = False,
                 binning: str = "exact"):
        self.base_cloud = cloud
        self.cfg = cfg
        self.rng = rng
        self.dyn_cfg = dyn_cfg or DynamicsConfig()
        self.rand = rand_cfg or RandomizationConfig()
        self.base_camera = camera or CameraModel()
        self.privileged = privileged
        self.binning = binning
        if occupancy is None:
            pts = collision_points if collision_points is not None \
                else extract_point_cloud(cloud, 0.5)
            occupancy = OccupancyMap(pts)
        self.occupancy = occupancy

        self.quad = Quadrotor(
            self.dyn_cfg, rng,
            latency_enabled=self.rand.enabled,
            action_noise_sigma=self.rand.action_noise_sigma if self.rand.enabled else 0.0,
            delay_range_ms=self.rand.delay_range_ms,
            resample_range_ms=self.rand.resample_range_ms)
        self.ou_vel = OuNoise(np.full(3, self.rand.vel_noise_sigma), self.rand.ou_theta)
        self.ou_dir = OuNoise(np.full(3, self.rand.dir_noise_sigma), self.rand.ou_theta)
        self.ou_z = OuNoise(np.array([self.rand.z_noise_sigma]), self.rand.ou_theta)
        self.state_norm = RunningNorm(20) if cfg.normalize_state else None

        self.cloud = cloud
        self.camera = self.base_camera
        self.step_count = 0
        self.prev_action = np.zeros(4)
        self._needs_reset = True

    # -- episode lifecycle -------------------------------------------------

    def reset_state(self):
        """Re-sample start pose and per-episode randomization; no rendering."""
        start = None
        for _ in range(1000):
            cand = self.rng.uniform(self.cfg.start_min, self.cfg.start_max)
            if not self.occupancy.query(cand):
                start = cand
                break
        if start is None:
            raise RuntimeError("no free start position found in start region after 1000 tries")
        yaw = self.rng.uniform(-math.pi, math.pi)
        self.quad.reset(QuadState(position=start, orientation=quat_from_yaw(yaw)))
        for ou in (self.ou_vel, self.ou_dir, self.ou_z):
            ou.reset()
        if self.rand.enabled:
            cr = ColorRandomization.sample(
                self.rng, self.rand.color_alpha_range,
                self.rand.color_beta_range, self.rand.color_noise_sigma)
            self.cloud = randomize_colors(self.base_cloud, cr, self.rng)
            self.camera = replace(self.base_camera,
                                  fov_x=float(self.rng.uniform(*self.rand.fov_range)))
        else:
            self.cloud = self.base_cloud
            self.camera = self.base_camera
        self.step_count = 0
        self.prev_action = np.zeros(4)
        self._needs_reset = False

    def reset(self) -> EnvObservation:
        self.reset_state()
        rgb, depth = self._render_single()
        return self.observe(rgb, depth)

    # -- stepping ----------------------------------------------------------

    def advance(self, action: Action) -> tuple[float, str, dict]:
        """Physics + termination + reward for one control step; no rendering."""
        if self._needs_reset:
            raise RuntimeError("environment must be reset before stepping")
        prev = self.quad.state.copy()
        a_t = action.as_array()
        info: dict = {}
        try:
            cur = self.quad.step(action)
            self.step_count += 1
            term = check_termination(cur, self.cfg, self.occupancy, self.step_count)
        except SimulationFault as exc:
            cur = self.quad.state
            term = TERM_FAULT
            info["fault"] = str(exc)
        events = {"collision": term == TERM_COLLISION, "success": term == TERM_SUCCESS}
        reward, breakdown = compute_reward(
            prev, cur, a_t, self.prev_action, events, self.cfg.goal,
            self.cfg.weights, self.cfg.v_max, self.dyn_cfg.dt_ctrl)
        self.prev_action = a_t
        info["reward_breakdown"] = breakdown
        info["termination"] = term
        return reward, term, info

    def step(self, action: Action) -> tuple[EnvObservation, float, str, dict]:
        reward, term, info = self.advance(action)
        rgb, depth = self._render_single()
        return self.observe(rgb, depth), reward, term, info

    # -- observation -------------------------------------------------------

    def camera_pose(self) -> Pose:
        R_bw = self.quad.state.rotation().T
        R_wc = _CAM_FROM_BODY @ R_bw
        return Pose(rot_to_quat(R_wc), self.quad.state.position.copy())

    def _render_single(self):
        mode = "rgbd" if self.privileged else "rgb"
        out = render_batch(self.cloud, [self.camera], [self.camera_pose()],
                           mode=mode, binning=self.binning)
        if self.privileged:
            return out[0][0], out[1][0]
        return out[0], None

    def observe(self, rgb: np.ndarray, depth: np.ndarray | None) -> EnvObservation:
        """Assemble the 20-dim state (with OU perception noise) and images."""
        s = self.quad.state
        R = s.rotation()
        v_b = R.T @ s.velocity + self.ou_vel.step(self.rng)
        diff = self.cfg.goal - s.position
        dist = np.linalg.norm(diff)
        if dist <= self.cfg.reach_radius:
            d_g = np.zeros(3)
        else:
            d_g = diff / dist + self.ou_dir.step(self.rng)
            d_g = d_g / max(np.linalg.norm(d_g), 1e-9)
        z_c = s.position[2] + self.ou_z.step(self.rng)[0]
        state = np.concatenate([v_b, R.reshape(-1), d_g,
                                [z_c, self.cfg.goal[2]], s.last_action])
        if self.state_norm is not None:
            self.state_norm.update(state)
            state = self.state_norm.normalize(state)
        obs = EnvObservation(rgb=np.clip(rgb, 0.0, 1.0), state=state,
                             depth=depth if self.privileged else None)
        return obs


class VecNavEnv:
    """Vectorized wrapper: steps N independent environments, batches renders.

    Terminated environments auto-reset; their returned observation is the
    first of the new episode and info carries reset=True plus the final
    termination cause.
    """

    def __init__(self, envs: list[NavEnv]):
        if not envs:
            raise ValueError("need at least one environment")
        self.envs = envs

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    def reset(self) -> list[EnvObservation]:
        for env in self.envs:
            env.reset_state()
        return self._render_observe()

    def step_batch(self, actions: list[Action]
                   ) -> tuple[list[EnvObservation], np.ndarray, list[str], list[dict]]:
        if len(actions) != len(self.envs):
            raise ValueError(f"{len(actions)} actions for {len(self.envs)} envs")
        rewards = np.zeros(len(self.envs))
        terms: list[str] = []
        infos: list[dict] = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            reward, term, info = env.advance(a)
            if term != TERM_RUNNING:
                env.reset_state()
                info["reset"] = True
            rewards[i] = reward
            terms.append(term)
            infos.append(info)
        obs = self._render_observe()
        return obs, rewards, terms, infos

    def _render_observe(self) -> list[EnvObservation]:
        privileged = any(e.privileged for e in self.envs)
        mode = "rgbd" if privileged else "rgb"
        clouds = [e.cloud for e in self.envs]
        cams = [e.camera for e in self.envs]
        poses = [e.camera_pose() for e in self.envs]
        binning = self.envs[0].binning
        out = render_batch(clouds, cams, poses, mode=mode, binning=binning)
        if privileged:
            rgbs, depths = out
        else:
            rgbs, depths = out, [None] * len(self.envs)
        return [e.observe(rgbs[i], depths[i] if e.privileged else None)
                for i, e in enumerate(self.envs)]
