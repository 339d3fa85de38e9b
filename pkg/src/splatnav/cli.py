"""Command-line surface: render, bench, prune, rollout, da-demo.

Exit codes: 0 success, 1 runtime fault, 2 usage/config error. All randomness
derives from --seed through named per-subsystem streams so results are
reproducible regardless of internal batch order.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time

import numpy as np

from .config import ConfigError, EngineConfig, make_vec_env, stream
from .domain_adapt import (DaConfig, DaNetwork, demo_config, gsi,
                           probe_accuracy, read_feature_dump, train_da_demo)
from .flight_dynamics import Action
from .geometry import quat_from_yaw, rot_to_quat
from .imgio import write_pgm16, write_ppm
from .nav_env import _CAM_FROM_BODY, TERM_RUNNING, NavEnv
from .rasterizer import Pose, importance_scores, render, render_batch, render_naive
from .splat_scene import prune as prune_cloud
from .splat_scene import save_ply


class UsageError(ValueError):
    pass


def _parse_pose(text: str) -> Pose:
    parts = text.split(",")
    if len(parts) != 7:
        raise UsageError(f"--pose needs 7 comma-separated values (x,y,z,qw,qx,qy,qz), got {len(parts)}")
    vals = [float(p) for p in parts]
    q = np.array(vals[3:])
    n = np.linalg.norm(q)
    if n < 1e-9:
        raise UsageError("--pose quaternion has zero norm")
    return Pose(q / n, np.array(vals[:3]))


def _random_poses(cloud_means: np.ndarray, n: int, rng: np.random.Generator) -> list[Pose]:
    """Poses inside the scene extent at flight height with random yaw."""
    lo = cloud_means.min(axis=0)
    hi = cloud_means.max(axis=0)
    poses = []
    for _ in range(n):
        pos = rng.uniform(lo, hi)
        pos[2] = rng.uniform(0.5, 1.5)
        yaw = rng.uniform(-np.pi, np.pi)
        R_bw = np.array([[np.cos(yaw), np.sin(yaw), 0],
                         [-np.sin(yaw), np.cos(yaw), 0],
                         [0, 0, 1.0]])
        poses.append(Pose(rot_to_quat(_CAM_FROM_BODY @ R_bw), pos))
    return poses


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# -- scripted policies -------------------------------------------------------


def policy_hover(env: NavEnv, rng) -> Action:
    return Action()


def policy_random(env: NavEnv, rng) -> Action:
    return Action.from_array(rng.uniform(-1.0, 1.0, size=4))


def policy_goto(env: NavEnv, rng) -> Action:
    """Proportional velocity-to-goal mapped into the normalized action space."""
    s = env.quad.state
    v_d = env.cfg.goal - s.position
    dist = np.linalg.norm(v_d)
    if dist > 1e-9:
        v_d = v_d / dist * min(0.8 * env.cfg.v_max, 1.2 * dist)
    e_world = v_d - s.velocity
    e_b = s.rotation().T @ e_world
    return Action(
        thrust_cmd=float(np.clip(0.8 * e_world[2], -1, 1)),
        roll_cmd=float(np.clip(-0.35 * e_b[1], -1, 1)),
        pitch_cmd=float(np.clip(0.35 * e_b[0], -1, 1)),
        yaw_cmd=0.0,
    )


_POLICIES = {"hover": policy_hover, "random": policy_random, "goto": policy_goto}


# -- subcommands -------------------------------------------------------------


def cmd_render(args) -> int:
    cfg = EngineConfig.load(args.config)
    cloud, _ = cfg.load_scene(args.seed)
    cam = cfg.camera()
    pose = _parse_pose(args.pose)
    t0 = time.perf_counter()
    out = render(cloud, cam, pose, mode=args.mode, binning=args.binning,
                 tile_size=cfg.getint("camera", "tile_size"))
    dt = time.perf_counter() - t0
    if args.mode == "rgb":
        write_ppm(args.out, np.clip(out, 0, 1))
    else:
        write_pgm16(args.out, out)
    print(f"rendered {cloud.count} gaussians in {dt * 1000:.2f} ms -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = EngineConfig.load(args.config)
    cloud, _ = cfg.load_scene(args.seed)
    cam = cfg.camera()
    rng = stream(args.seed, "bench")
    poses = _random_poses(cloud.means, args.views, rng)
    cams = [cam] * args.views
    if args.binning == "naive":
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            for p in poses:
                render_naive(cloud, cam, p)
            times.append(time.perf_counter() - t0)
    else:
        render_batch(cloud, cams, poses, binning=args.binning)  # warm the JIT
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            render_batch(cloud, cams, poses, binning=args.binning)
            times.append(time.perf_counter() - t0)
    fps = args.views / statistics.median(times)
    print(f"{args.views},{cloud.count},{args.binning},{fps:.1f}")
    return 0


def cmd_prune(args) -> int:
    if not 0.0 < args.keep <= 1.0:
        raise UsageError("--keep must be in (0, 1]")
    cfg = EngineConfig.load(args.config)
    cloud, _ = cfg.load_scene(args.seed)
    cam = cfg.camera()
    poses = _random_poses(cloud.means, args.views, stream(args.seed, "prune"))
    if args.method == "importance":
        scores = importance_scores(cloud, [cam] * args.views, poses)
    else:
        scores = stream(args.seed, "prune-random").uniform(size=cloud.count)
    pruned = prune_cloud(cloud, scores, args.keep)
    save_ply(pruned, args.out)

    eval_poses = _random_poses(cloud.means, 8, stream(args.seed, "prune-eval"))
    full = render_batch(cloud, [cam] * 8, eval_poses)
    approx = render_batch(pruned, [cam] * 8, eval_poses)
    score = psnr(np.clip(full, 0, 1), np.clip(approx, 0, 1))
    print(f"gaussians: {cloud.count} -> {pruned.count}")
    print(f"held-out psnr: {score:.2f} dB")
    return 0


def cmd_rollout(args) -> int:
    cfg = EngineConfig.load(args.config)
    vec = make_vec_env(cfg, args.envs, args.seed)
    policy = _POLICIES[args.policy]
    policy_rng = stream(args.seed, "policy")
    vec.reset()

    counts: dict[str, int] = {}
    episode_rewards: list[float] = []
    running = np.zeros(vec.n_envs)
    log_f = open(args.log, "w") if args.log else None
    episodes_done = 0
    t = 0
    try:
        while True:
            if args.steps is not None:
                if t >= args.steps:
                    break
            elif episodes_done >= args.episodes:
                break
            actions = [policy(env, policy_rng) for env in vec.envs]
            obs, rewards, terms, infos = vec.step_batch(actions)
            for i, env in enumerate(vec.envs):
                running[i] += rewards[i]
                if log_f:
                    s = env.quad.state
                    log_f.write(json.dumps({
                        "t": t, "env": i,
                        "action": [round(v, 9) for v in actions[i].as_array()],
                        "reward": rewards[i],
                        "breakdown": infos[i]["reward_breakdown"],
                        "termination": terms[i],
                        "position": list(s.position),
                        "velocity": list(s.velocity),
                        "quaternion": list(s.orientation),
                    }) + "\n")
                if terms[i] != TERM_RUNNING:
                    counts[terms[i]] = counts.get(terms[i], 0) + 1
                    episode_rewards.append(running[i])
                    running[i] = 0.0
                    episodes_done += 1
            t += 1
    finally:
        if log_f:
            log_f.close()
    mean_reward = float(np.mean(episode_rewards)) if episode_rewards else 0.0
    summary = {"episodes": episodes_done, "mean_reward": round(mean_reward, 6),
               "outcomes": {k: counts[k] for k in sorted(counts)}}
    print(json.dumps(summary))
    return 0


def cmd_da_demo(args) -> int:
    if args.features:
        feats_s, _ = read_feature_dump(args.features[0])
        feats_t, _ = read_feature_dump(args.features[1])
        feats = np.concatenate([feats_s, feats_t])
        labels = np.concatenate([np.ones(len(feats_s)), np.zeros(len(feats_t))])
        print(f"gsi: {gsi(feats, labels):.4f}")
        print(f"probe_acc: {probe_accuracy(feats, labels):.4f}")
        return 0

    if args.config:
        c = EngineConfig.load(args.config)
        da_cfg = DaConfig(
            input_dim=c.getint("da", "input_dim"),
            content_dim=c.getint("da", "content_dim"),
            encoder_hidden=tuple(int(v) for v in c.get("da", "encoder_hidden").split(",")),
            disc_hidden=tuple(int(v) for v in c.get("da", "disc_hidden").split(",")),
            lambda_grl=c.getfloat("da", "lambda_grl"),
            lambda1=c.getfloat("da", "lambda1"),
            lambda2=c.getfloat("da", "lambda2"),
            lr=c.getfloat("da", "lr"),
        )
    else:
        da_cfg = demo_config()
    if args.lambda_grl is not None:
        da_cfg.lambda_grl = args.lambda_grl
    rng = stream(args.seed, "da")
    net = DaNetwork(da_cfg, rng)
    report = train_da_demo(net, args.epochs, rng)
    with open(args.report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "da_loss", "disc_acc", "gsi", "probe_acc", "task_loss"])
        for row in report.rows:
            writer.writerow([row["epoch"], f"{row['da_loss']:.6f}",
                             f"{row['disc_acc']:.6f}", f"{row['gsi']:.6f}",
                             f"{row['probe_acc']:.6f}", f"{row['task_loss']:.6f}"])
    final = report.final()
    print(f"final: disc_acc={final['disc_acc']:.3f} gsi={final['gsi']:.3f} "
          f"probe_acc={final['probe_acc']:.3f} task_loss={final['task_loss']:.4f}")
    if report.diverged:
        print("training diverged (non-finite loss)", file=sys.stderr)
        return 1
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatnav")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render one view to PPM/PGM")
    r.add_argument("--config", required=True)
    r.add_argument("--pose", required=True, help="x,y,z,qw,qx,qy,qz (world-to-camera)")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=["rgb", "depth"], default="rgb")
    r.add_argument("--binning", choices=["square", "exact"], default="exact")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", help="batched rendering throughput")
    b.add_argument("--config", required=True)
    b.add_argument("--views", type=int, default=64)
    b.add_argument("--binning", choices=["square", "exact", "naive"], default="exact")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    pr = sub.add_parser("prune", help="importance-prune a scene")
    pr.add_argument("--config", required=True)
    pr.add_argument("--views", type=int, default=16)
    pr.add_argument("--keep", type=float, required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--method", choices=["importance", "random"], default="importance")
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_prune)

    ro = sub.add_parser("rollout", help="run scripted-policy episodes")
    ro.add_argument("--config", required=True)
    ro.add_argument("--policy", choices=sorted(_POLICIES), default="goto")
    ro.add_argument("--episodes", type=int, default=10)
    ro.add_argument("--steps", type=int, default=None,
                    help="run a fixed number of vector steps instead of episodes")
    ro.add_argument("--envs", type=int, default=1)
    ro.add_argument("--log", default=None)
    ro.add_argument("--seed", type=int, default=0)
    ro.set_defaults(func=cmd_rollout)

    d = sub.add_parser("da-demo", help="adversarial domain-adaptation demo")
    d.add_argument("--config", default=None)
    d.add_argument("--epochs", type=int, default=400)
    d.add_argument("--lambda", dest="lambda_grl", type=float, default=None)
    d.add_argument("--report", default="da_report.csv")
    d.add_argument("--features", nargs=2, default=None,
                   metavar=("SOURCE.bin", "TARGET.bin"))
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_da_demo)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
