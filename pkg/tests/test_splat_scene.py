import struct

import numpy as np
import pytest

from splatnav.rasterizer import CameraModel, render
from splatnav.splat_scene import (ColorRandomization, GaussianCloud,
                                  PlyParseError, SceneTransform,
                                  apply_transform, extract_point_cloud,
                                  load_ply, prune, randomize_colors,
                                  random_cloud, save_ply)

from conftest import look_along_x

_PROPS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
          "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def write_scripted_ply(path, rows, props=_PROPS):
    """Minimal independent PLY writer used as the round-trip oracle."""
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(rows)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for row in rows:
            f.write(struct.pack(f"<{len(props)}f", *row))


def test_load_normalizes_quaternion(tmp_path):
    p = tmp_path / "one.ply"
    write_scripted_ply(p, [[0, 0, 0, 0.1, 0.2, 0.3, 0.0, -1, -1, -1, 2, 0, 0, 0]])
    cloud = load_ply(p)
    assert np.allclose(cloud.rotations[0], [1, 0, 0, 0])


def test_missing_property_message(tmp_path):
    p = tmp_path / "bad.ply"
    props = [q for q in _PROPS if q != "opacity"]
    write_scripted_ply(p, [[0.0] * len(props)], props=props)
    with pytest.raises(PlyParseError, match="missing property: opacity"):
        load_ply(p)


def test_roundtrip_payload_identical(tmp_path):
    rng = np.random.default_rng(3)
    rows = []
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        rows.append(list(rng.normal(size=10)) + list(q))
    src = tmp_path / "src.ply"
    write_scripted_ply(src, rows)
    cloud = load_ply(src)
    out = tmp_path / "out.ply"
    save_ply(cloud, out)
    cloud2 = load_ply(out)
    for a, b in [(cloud.means, cloud2.means), (cloud.scales, cloud2.scales),
                 (cloud.rotations, cloud2.rotations),
                 (cloud.opacity_logits, cloud2.opacity_logits),
                 (cloud.sh_dc, cloud2.sh_dc)]:
        assert np.array_equal(a, b)


def test_identity_transform_bitwise(small_cloud):
    out = apply_transform(small_cloud, SceneTransform())
    for name in ("means", "scales", "rotations", "opacity_logits", "sh_dc"):
        assert np.array_equal(getattr(out, name), getattr(small_cloud, name))


def _single_gaussian(mean, log_scale=0.0):
    return GaussianCloud(
        means=np.array([mean], dtype=float),
        scales=np.full((1, 3), log_scale, dtype=float),
        rotations=np.array([[1.0, 0, 0, 0]]),
        opacity_logits=np.zeros(1),
        sh_dc=np.zeros((1, 3)),
    )


def test_uniform_scale_transform():
    out = apply_transform(_single_gaussian([1, 0, 0]), SceneTransform(scale=2.0))
    assert np.allclose(out.means[0], [2, 0, 0])
    assert np.allclose(out.scales[0], np.log(2.0))


def test_yaw_rotation_transform():
    from splatnav.geometry import quat_from_yaw
    t = SceneTransform(rotation=quat_from_yaw(np.pi / 2))
    out = apply_transform(_single_gaussian([1, 0, 0]), t)
    assert np.allclose(out.means[0], [0, 1, 0], atol=1e-6)


def test_color_identity(small_cloud):
    out = randomize_colors(small_cloud, ColorRandomization(), np.random.default_rng(0))
    assert np.array_equal(out.sh_dc, small_cloud.sh_dc)


def test_color_affine_arithmetic():
    cloud = _single_gaussian([0, 0, 0])
    cloud = GaussianCloud(cloud.means, cloud.scales, cloud.rotations,
                          cloud.opacity_logits, np.array([[0.1, 0.2, 0.3]]))
    out = randomize_colors(cloud, ColorRandomization(alpha=1.3, beta=0.05),
                           np.random.default_rng(0))
    assert np.allclose(out.sh_dc[0], [0.18, 0.31, 0.44], atol=1e-6)


def test_color_sampler_bounds():
    rng = np.random.default_rng(0)
    cfgs = [ColorRandomization.sample(rng) for _ in range(2000)]
    assert all(0.8 <= c.alpha <= 1.3 for c in cfgs)
    assert all(-0.05 <= c.beta <= 0.05 for c in cfgs)


def test_extract_point_cloud(small_cloud):
    assert len(extract_point_cloud(small_cloud, opacity_min=0.0)) == small_cloud.count
    cloud = GaussianCloud(
        means=np.array([[0.0, 0, 0], [1, 0, 0]]),
        scales=np.zeros((2, 3)),
        rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
        opacity_logits=np.array([np.log(9.0), np.log(1 / 9.0)]),  # 0.9, 0.1
        sh_dc=np.zeros((2, 3)),
    )
    pts = extract_point_cloud(cloud, opacity_min=0.5)
    assert pts.shape == (1, 3) and np.allclose(pts[0], [0, 0, 0])


def test_extract_commutes_with_transform(small_cloud):
    t = SceneTransform(scale=1.5, translation=np.array([1.0, -2.0, 0.5]))
    a = extract_point_cloud(apply_transform(small_cloud, t))
    b = extract_point_cloud(small_cloud) * t.scale + t.translation
    assert a.shape == b.shape
    assert np.allclose(a, b, atol=1e-9)


def test_prune_keep_all(small_cloud):
    scores = np.random.default_rng(1).uniform(size=small_cloud.count)
    out = prune(small_cloud, scores, 1.0)
    assert np.array_equal(out.means, small_cloud.means)


def test_prune_order_and_selection():
    cloud = random_cloud(3, np.random.default_rng(0))
    out = prune(cloud, np.array([3.0, 1.0, 2.0]), 2 / 3)
    assert out.count == 2
    assert np.array_equal(out.means, cloud.means[[0, 2]])


def test_prune_importance_beats_random(camera):
    from splatnav.rasterizer import importance_scores
    rng = np.random.default_rng(11)
    cloud = random_cloud(1000, rng)
    poses = [look_along_x([-4.0, y, 1.0]) for y in (-0.5, 0.0, 0.5)]
    cams = [camera] * len(poses)
    ref = [render(cloud, camera, p) for p in poses]

    scores = importance_scores(cloud, cams, poses)
    by_importance = prune(cloud, scores, 0.5)
    by_random = prune(cloud, rng.uniform(size=cloud.count), 0.5)

    def psnr(cl):
        mse = np.mean([
            (np.clip(render(cl, camera, p), 0, 1) - np.clip(r, 0, 1)) ** 2
            for p, r in zip(poses, ref)])
        return 10 * np.log10(1.0 / mse)

    assert psnr(by_importance) >= psnr(by_random)
