"""Engine configuration: sectioned key=value files with strict key checking.

Every Table-2-style randomization default is pre-populated; unknown sections
or keys are rejected so a typo cannot silently fall back to a default. A
scene bundle directory (scene.ply, optional points.ply, scene.cfg) can be
referenced from [scene] bundle; its scene.cfg keys override the main file.
"""

from __future__ import annotations

import configparser
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .flight_dynamics import DynamicsConfig
from .nav_env import (EpisodeConfig, NavEnv, OccupancyMap,
                      RandomizationConfig, RewardWeights, VecNavEnv)
from .rasterizer import CameraModel
from .splat_scene import (GaussianCloud, SceneTransform, apply_transform,
                          extract_point_cloud, load_ply, pillar_forest,
                          random_cloud)


class ConfigError(ValueError):
    pass


_DEFAULTS: dict[str, dict[str, str]] = {
    "scene": {
        "ply": "",
        "bundle": "",
        "points_ply": "",
        "synthetic": "pillars",        # none | box | pillars
        "synthetic_count": "2000",
        "transform_scale": "1.0",
        "transform_rotation": "1,0,0,0",
        "transform_translation": "0,0,0",
        "color_alpha_range": "0.8,1.3",
        "color_beta_range": "-0.05,0.05",
        "color_noise_sigma": "0.025",
        "fov_range": "67,106",
    },
    "camera": {
        "width": "80",
        "height": "60",
        "fov_x": "90.0",
        "near": "0.05",
        "far": "20.0",
        "tile_size": "16",
    },
    "dynamics": {
        "mass": "1.0",
        "inertia": "0.01,0.01,0.02",
        "drag": "0.1",
        "dt_sim": "0.004",
        "control_decimation": "5",
        "tilt_max_deg": "35.0",
        "yawrate_max_deg": "120.0",
        "thrust_gain": "0.5",
        "thrust_max": "25.0",
        "kp_ang": "8.0",
        "kp_rate": "0.2",
        "kd_rate": "0.004",
    },
    "randomization": {
        "enabled": "true",
        "action_noise_sigma": "0.05",
        "delay_range_ms": "0,80",
        "resample_range_ms": "10,100",
        "ou_theta": "0.1",
        "vel_noise_sigma": "0.08",
        "dir_noise_sigma": "0.05",
        "z_noise_sigma": "0.03",
    },
    "env": {
        "goal": "3,0,1",
        "start_min": "-1,-1,0.8",
        "start_max": "0,1,1.2",
        "z_range": "0.1,1.7",
        "v_max": "2.0",
        "reach_radius": "0.3",
        "max_steps": "512",
        "voxel": "0.1",
        "inflation": "0.2",
        "privileged": "false",
        "normalize_state": "false",
        "binning": "exact",
        "w_collision": "-80.0",
        "w_z_velocity": "-0.5",
        "w_action_magnitude": "-0.3",
        "w_action_change": "-0.6",
        "w_distance": "30.0",
        "w_success": "80.0",
        "w_velocity_excess": "-1.0",
    },
    "da": {
        "input_dim": "16",
        "content_dim": "4",
        "encoder_hidden": "64,6",
        "disc_hidden": "32",
        "lambda_grl": "1.0",
        "lambda1": "1.0",
        "lambda2": "3.0",
        "lr": "0.1",
    },
}


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


@dataclass
class EngineConfig:
    values: dict[str, dict[str, str]]
    base_dir: str = "."

    @staticmethod
    def default() -> "EngineConfig":
        return EngineConfig({s: dict(kv) for s, kv in _DEFAULTS.items()})

    @staticmethod
    def load(path) -> "EngineConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cfg = EngineConfig.default()
        cfg.base_dir = os.path.dirname(os.path.abspath(path))
        cfg._merge_file(path)
        bundle = cfg.get("scene", "bundle")
        if bundle:
            bundle = cfg.resolve(bundle)
            scene_cfg = os.path.join(bundle, "scene.cfg")
            if os.path.exists(scene_cfg):
                cfg._merge_file(scene_cfg)
        return cfg

    def _merge_file(self, path):
        parser = configparser.ConfigParser()
        with open(path) as f:
            parser.read_file(f)
        for section in parser.sections():
            if section not in self.values:
                raise ConfigError(f"unknown config section: [{section}]")
            for key, val in parser.items(section):
                if key not in self.values[section]:
                    raise ConfigError(f"unknown config key: [{section}] {key}")
                self.values[section][key] = val

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def getfloat(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def getint(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def getbool(self, section: str, key: str) -> bool:
        v = self.get(section, key).strip().lower()
        if v in ("true", "1", "yes", "on"):
            return True
        if v in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean for [{section}] {key}: {v}")

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    # -- materialized objects ------------------------------------------------

    def scene_transform(self) -> SceneTransform:
        return SceneTransform(
            scale=self.getfloat("scene", "transform_scale"),
            rotation=np.array(_floats(self.get("scene", "transform_rotation"))),
            translation=np.array(_floats(self.get("scene", "transform_translation"))),
        )

    def load_scene(self, seed: int = 0) -> tuple[GaussianCloud, np.ndarray]:
        """Returns (cloud, collision points), transformed into the sim world."""
        bundle = self.get("scene", "bundle")
        ply = self.get("scene", "ply")
        points = None
        if bundle:
            bundle = self.resolve(bundle)
            scene_ply = os.path.join(bundle, "scene.ply")
            if not os.path.exists(scene_ply):
                raise ConfigError(f"scene file not found: {scene_ply}")
            cloud = load_ply(scene_ply)
            points_ply = os.path.join(bundle, "points.ply")
            if os.path.exists(points_ply):
                points = load_ply(points_ply).means
        elif ply:
            ply = self.resolve(ply)
            if not os.path.exists(ply):
                raise ConfigError(f"scene file not found: {ply}")
            cloud = load_ply(ply)
        else:
            kind = self.get("scene", "synthetic").strip().lower()
            n = self.getint("scene", "synthetic_count")
            rng = np.random.default_rng([seed, 0x5CE7E])
            if kind == "box":
                cloud = random_cloud(n, rng)
            elif kind == "pillars":
                cloud = pillar_forest(rng, n_pillars=max(1, n // 80))
            else:
                raise ConfigError(f"no scene: set [scene] ply/bundle or synthetic, got '{kind}'")
        cloud = apply_transform(cloud, self.scene_transform())
        if points is None:
            points = extract_point_cloud(cloud, 0.5)
        return cloud, points

    def camera(self) -> CameraModel:
        return CameraModel(
            width=self.getint("camera", "width"),
            height=self.getint("camera", "height"),
            fov_x=self.getfloat("camera", "fov_x"),
            near=self.getfloat("camera", "near"),
            far=self.getfloat("camera", "far"),
        )

    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig(
            mass=self.getfloat("dynamics", "mass"),
            inertia=_floats(self.get("dynamics", "inertia")),
            drag=self.getfloat("dynamics", "drag"),
            dt_sim=self.getfloat("dynamics", "dt_sim"),
            control_decimation=self.getint("dynamics", "control_decimation"),
            tilt_max_deg=self.getfloat("dynamics", "tilt_max_deg"),
            yawrate_max_deg=self.getfloat("dynamics", "yawrate_max_deg"),
            thrust_gain=self.getfloat("dynamics", "thrust_gain"),
            thrust_max=self.getfloat("dynamics", "thrust_max"),
            kp_ang=self.getfloat("dynamics", "kp_ang"),
            kp_rate=self.getfloat("dynamics", "kp_rate"),
            kd_rate=self.getfloat("dynamics", "kd_rate"),
        )

    def randomization(self) -> RandomizationConfig:
        return RandomizationConfig(
            enabled=self.getbool("randomization", "enabled"),
            action_noise_sigma=self.getfloat("randomization", "action_noise_sigma"),
            delay_range_ms=_floats(self.get("randomization", "delay_range_ms")),
            resample_range_ms=_floats(self.get("randomization", "resample_range_ms")),
            ou_theta=self.getfloat("randomization", "ou_theta"),
            vel_noise_sigma=self.getfloat("randomization", "vel_noise_sigma"),
            dir_noise_sigma=self.getfloat("randomization", "dir_noise_sigma"),
            z_noise_sigma=self.getfloat("randomization", "z_noise_sigma"),
            color_alpha_range=_floats(self.get("scene", "color_alpha_range")),
            color_beta_range=_floats(self.get("scene", "color_beta_range")),
            color_noise_sigma=self.getfloat("scene", "color_noise_sigma"),
            fov_range=_floats(self.get("scene", "fov_range")),
        )

    def episode(self) -> EpisodeConfig:
        weights = RewardWeights(
            collision=self.getfloat("env", "w_collision"),
            z_velocity=self.getfloat("env", "w_z_velocity"),
            action_magnitude=self.getfloat("env", "w_action_magnitude"),
            action_change=self.getfloat("env", "w_action_change"),
            distance=self.getfloat("env", "w_distance"),
            success=self.getfloat("env", "w_success"),
            velocity_excess=self.getfloat("env", "w_velocity_excess"),
        )
        return EpisodeConfig(
            goal=np.array(_floats(self.get("env", "goal"))),
            start_min=np.array(_floats(self.get("env", "start_min"))),
            start_max=np.array(_floats(self.get("env", "start_max"))),
            z_range=_floats(self.get("env", "z_range")),
            v_max=self.getfloat("env", "v_max"),
            reach_radius=self.getfloat("env", "reach_radius"),
            max_steps=self.getint("env", "max_steps"),
            weights=weights,
            normalize_state=self.getbool("env", "normalize_state"),
        )


def stream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream derived from a single root seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def make_vec_env(cfg: EngineConfig, n_envs: int, seed: int,
                 privileged: bool | None = None) -> VecNavEnv:
    """Construct N independent environments sharing one scene and occupancy.

    Environment i always draws from stream(seed, "env{i}") so results do not
    depend on batch size or stepping order.
    """
    if n_envs < 1:
        raise ConfigError("n_envs must be >= 1")
    cloud, points = cfg.load_scene(seed)
    occupancy = OccupancyMap(points, cfg.getfloat("env", "voxel"),
                             cfg.getfloat("env", "inflation"))
    if privileged is None:
        privileged = cfg.getbool("env", "privileged")
    envs = [
        NavEnv(cloud, cfg.episode(), stream(seed, f"env{i}"),
               dyn_cfg=cfg.dynamics(), rand_cfg=cfg.randomization(),
               camera=cfg.camera(), occupancy=occupancy,
               privileged=privileged, binning=cfg.get("env", "binning"))
        for i in range(n_envs)
    ]
    return VecNavEnv(envs)
