import numpy as np
import pytest

from conftest import look_along_x
from splatnav.geometry import rot_to_quat
from splatnav.rasterizer import (ALPHA_SKIP, BLUR_FLOOR, CameraModel, Pose,
                                 ProjectedGaussians, importance_scores,
                                 project, render, render_batch, render_naive,
                                 tile_bins_exact, tile_bins_square)
from splatnav.splat_scene import GaussianCloud, random_cloud


def make_cloud(means, scales=None, opacities=None, colors=None, rotations=None):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n = len(means)
    opac = np.full(n, 0.5) if opacities is None else np.asarray(opacities, float)
    logits = np.log(opac / (1.0 - opac))
    from splatnav.rasterizer import SH_C0
    color = np.full((n, 3), 0.5) if colors is None else np.atleast_2d(colors)
    return GaussianCloud(
        means=means,
        scales=np.log(np.full((n, 3), 0.05) if scales is None else np.atleast_2d(scales)),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)) if rotations is None else rotations,
        opacity_logits=logits,
        sh_dc=(color - 0.5) / SH_C0,
    )


def identity_pose():
    """Camera at origin with camera axes = world axes (looks along world +z)."""
    return Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))


# -- projection ---------------------------------------------------------------


def test_on_axis_projects_to_center(camera):
    proj = project(make_cloud([[0, 0, 1.0]]), camera, identity_pose())
    assert proj.mean2d.shape == (1, 2)
    assert np.allclose(proj.mean2d[0], [camera.cx, camera.cy], atol=1e-4)
    assert np.isclose(proj.depth[0], 1.0)


def test_on_axis_isotropic_cov2d(camera):
    sigma, z = 0.04, 2.0
    proj = project(make_cloud([[0, 0, z]], scales=[[sigma] * 3]), camera,
                   identity_pose())
    expected = (camera.fx * sigma / z) ** 2 + BLUR_FLOOR
    a, b, c = proj.cov2d[0]
    assert np.isclose(a, expected, rtol=1e-6)
    assert np.isclose(c, expected, rtol=1e-6)
    assert abs(b) < 1e-9


def test_behind_camera_culled(camera):
    proj = project(make_cloud([[0, 0, -1.0], [0, 0, 1.0]]), camera, identity_pose())
    assert len(proj.depth) == 1
    assert proj.source_index[0] == 1


# -- tile binning -------------------------------------------------------------


def gauss_tiles(bins, n):
    """Invert per-tile index lists into per-Gaussian tile coordinate sets."""
    out = [set() for _ in range(n)]
    for t, members in enumerate(bins.tile_sets()):
        coord = (t % bins.tiles_x, t // bins.tiles_x)
        for g in members:
            out[g].add(coord)
    return out


def projected_single(camera, mean2d, cov2d=(1.0, 0.0, 1.0), opacity=0.9):
    return ProjectedGaussians(
        mean2d=np.array([mean2d], dtype=float),
        cov2d=np.array([cov2d], dtype=float),
        depth=np.ones(1),
        color=np.full((1, 3), 0.5),
        opacity=np.array([opacity]),
        source_index=np.zeros(1, dtype=np.int64),
    )


def test_square_unit_cov_one_tile(camera):
    # r = ceil(3*sqrt(1)) = 3 px around a tile center -> stays inside the tile
    bins = tile_bins_square(projected_single(camera, [24.0, 24.0]), camera)
    assert gauss_tiles(bins, 1)[0] == {(1, 1)}


def test_square_four_tile_corner(camera):
    bins = tile_bins_square(projected_single(camera, [16.0, 16.0]), camera)
    assert gauss_tiles(bins, 1)[0] == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_square_large_radius(camera):
    # lambda_max = 100 -> r = 30; square [10, 70] x [10, 70] in pixels
    bins = tile_bins_square(
        projected_single(camera, [40.0, 40.0], cov2d=(100.0, 0.0, 25.0)), camera)
    expected = {(tx, ty) for tx in range(5) for ty in range(4)
                if tx * 16 <= 70 and ty * 16 <= 70}
    assert gauss_tiles(bins, 1)[0] == expected


def test_exact_subset_of_square(camera):
    rng = np.random.default_rng(5)
    n = 300
    m = rng.normal(size=(n, 2, 2))
    cov = np.einsum("nij,nkj->nik", m, m) + 0.3 * np.eye(2)
    proj = ProjectedGaussians(
        mean2d=rng.uniform([-20, -20], [100, 80], size=(n, 2)),
        cov2d=np.stack([cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]], axis=1),
        depth=np.ones(n),
        color=np.full((n, 3), 0.5),
        opacity=rng.uniform(0.02, 0.99, n),
        source_index=np.arange(n, dtype=np.int64),
    )
    exact = gauss_tiles(tile_bins_exact(proj, camera), n)
    square = gauss_tiles(tile_bins_square(proj, camera), n)
    for i in range(n):
        assert exact[i] <= square[i]


def test_exact_prunes_anisotropic_tiles(camera):
    proj = projected_single(camera, [40.0, 30.0], cov2d=(400.0, 0.0, 1.0),
                            opacity=0.99)
    exact = gauss_tiles(tile_bins_exact(proj, camera), 1)[0]
    square = gauss_tiles(tile_bins_square(proj, camera), 1)[0]
    assert exact < square
    # the ellipse is ~3 px tall around y=30: only tile rows 1-2 can touch it,
    # while the 60-px bounding square also claims rows 0 and 3
    assert all(ty in (1, 2) for _, ty in exact)
    assert any(ty in (0, 3) for _, ty in square)


def test_negligible_opacity_unbinned(camera):
    proj = projected_single(camera, [40.0, 30.0], opacity=ALPHA_SKIP / 2)
    assert gauss_tiles(tile_bins_exact(proj, camera), 1)[0] == set()


# -- compositing --------------------------------------------------------------


def test_single_gaussian_center_pixel(camera):
    cloud = make_cloud([[0, 0, 1.0]], scales=[[0.2] * 3], opacities=[0.8],
                       colors=[[0.9, 0.3, 0.1]])
    img = render(cloud, camera, identity_pose())
    proj = project(cloud, camera, identity_pose())
    # alpha at the pixel center nearest the projected mean
    d = np.array([40.5, 30.5]) - proj.mean2d[0]
    a, b, c = proj.cov2d[0]
    det = a * c - b * b
    q = (c * d[0] ** 2 - 2 * b * d[0] * d[1] + a * d[1] ** 2) / det
    alpha = min(0.99, proj.opacity[0] * np.exp(-0.5 * q))
    assert np.allclose(img[30, 40], alpha * proj.color[0], atol=1e-12)


def test_two_gaussian_compositing(camera):
    cloud = make_cloud([[0, 0, 1.0], [0, 0, 2.0]],
                       scales=[[0.3] * 3, [0.6] * 3],
                       opacities=[0.4, 0.7],
                       colors=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    img = render(cloud, camera, identity_pose())
    proj = project(cloud, camera, identity_pose())

    def alpha_at(i, px):
        d = px - proj.mean2d[i]
        a, b, c = proj.cov2d[i]
        det = a * c - b * b
        q = (c * d[0] ** 2 - 2 * b * d[0] * d[1] + a * d[1] ** 2) / det
        return min(0.99, proj.opacity[i] * np.exp(-0.5 * q))

    px = np.array([40.5, 30.5])
    order = np.argsort(proj.depth)
    a1, a2 = alpha_at(order[0], px), alpha_at(order[1], px)
    c1, c2 = proj.color[order[0]], proj.color[order[1]]
    assert np.allclose(img[30, 40], c1 * a1 + c2 * a2 * (1 - a1), atol=1e-12)


def test_tiled_matches_naive_oracle(camera, small_cloud):
    pose = look_along_x([-4.0, 0.0, 1.0])
    ref_rgb, ref_depth = render_naive(small_cloud, camera, pose, mode="rgbd")
    for binning in ("square", "exact"):
        rgb, depth = render(small_cloud, camera, pose, mode="rgbd", binning=binning)
        assert np.max(np.abs(rgb - ref_rgb)) <= 1e-4
        assert np.max(np.abs(depth - ref_depth)) <= 1e-4


def test_depth_mode(camera):
    cloud = make_cloud([[0, 0, 3.0]], scales=[[0.5] * 3], opacities=[0.95])
    depth = render(cloud, camera, identity_pose(), mode="depth")
    assert depth.shape == (camera.height, camera.width)
    assert np.isclose(depth[30, 40], 3.0, atol=0.05)


def test_render_rejects_bad_mode(camera, small_cloud):
    with pytest.raises(ValueError):
        render(small_cloud, camera, identity_pose(), mode="grayscale")


# -- batching -----------------------------------------------------------------


def test_batch_single_matches_render(camera, small_cloud):
    pose = look_along_x([-4.0, 0.0, 1.0])
    single = render(small_cloud, camera, pose)
    batch = render_batch(small_cloud, [camera], [pose])
    assert batch.shape == (1,) + single.shape
    assert np.array_equal(batch[0], single)


def test_batch_identical_poses(camera, small_cloud):
    poses = [look_along_x([-4.0, 0.0, 1.0])] * 8
    batch = render_batch(small_cloud, [camera] * 8, poses)
    for i in range(1, 8):
        assert np.array_equal(batch[i], batch[0])


def test_batch_matches_sequential(camera):
    rng = np.random.default_rng(2)
    cloud = random_cloud(150, rng)
    poses = [look_along_x([-4.0, y, 1.0]) for y in rng.uniform(-1, 1, 16)]
    batch = render_batch(cloud, [camera] * 16, poses)
    for i, p in enumerate(poses):
        assert np.max(np.abs(batch[i] - render(cloud, camera, p))) <= 1e-6


# -- importance ---------------------------------------------------------------


def test_importance_single_gaussian(camera):
    cloud = make_cloud([[0, 0, 1.0]], scales=[[0.15] * 3], opacities=[0.6],
                       colors=[[0.8, 0.4, 0.2]])
    score = importance_scores(cloud, [camera], [identity_pose()])[0]
    proj = project(cloud, camera, identity_pose())
    a, b, c = proj.cov2d[0]
    det = a * c - b * b
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    dx = xs[None, :] - proj.mean2d[0, 0]
    dy = ys[:, None] - proj.mean2d[0, 1]
    q = (c * dx ** 2 - 2 * b * dx * dy + a * dy ** 2) / det
    alpha = np.minimum(0.99, proj.opacity[0] * np.exp(-0.5 * q))
    alpha = np.where((alpha >= ALPHA_SKIP) & (q <= 9.0), alpha, 0.0)
    # clamped pixels contribute no gradient; unclamped: dC/dg = alpha * color
    grad = np.where(alpha < 0.99, alpha, 0.0)
    expected = float(np.sum(grad[..., None] ** 2 * proj.color[0] ** 2))
    assert np.isclose(score, expected, rtol=1e-9)


def test_importance_occluded_is_tiny(camera):
    cloud = make_cloud([[0, 0, 1.0], [0, 0, 2.0]],
                       scales=[[1.0] * 3, [0.1] * 3],
                       opacities=[0.999, 0.9],
                       colors=[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
    scores = importance_scores(cloud, [camera], [identity_pose()])
    assert scores[1] < 1e-2 * scores[0]


def test_importance_matches_finite_differences(camera):
    rng = np.random.default_rng(4)
    cloud = random_cloud(20, rng)
    poses = [look_along_x([-4.0, y, 1.0]) for y in (-0.4, 0.0, 0.4)]
    scores = importance_scores(cloud, [camera] * 3, poses)

    h = 1e-3
    fd = np.zeros(cloud.count)
    for pose in poses:
        for i in range(cloud.count):
            g = np.ones(cloud.count)
            g[i] = 1.0 + h
            up = render_naive(cloud, camera, pose, alpha_multipliers=g)
            g[i] = 1.0 - h
            dn = render_naive(cloud, camera, pose, alpha_multipliers=g)
            fd[i] += float(np.sum(((up - dn) / (2 * h)) ** 2))
    mask = fd > 1e-12
    assert mask.any()
    rel = np.abs(scores[mask] - fd[mask]) / fd[mask]
    assert rel.max() <= 1e-3
