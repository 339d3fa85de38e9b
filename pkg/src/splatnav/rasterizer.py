"""Tile-based Gaussian splat rasterizer.

Pipeline per view: EWA perspective projection -> tile binning (square 3-sigma
box or exact ellipse-tile overlap) -> per-tile front-to-back alpha
compositing. Also provides the analytic squared-gradient importance scores
used for pruning, and a deliberately naive renderer kept as an independent
oracle for tests and benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import quat_to_rot
from .splat_scene import GaussianCloud

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_EARLY_EXIT = 1e-4
BLUR_FLOOR = 0.3     # px^2 added to the projected covariance diagonal
FOOTPRINT_Q = 9.0    # Mahalanobis^2 cutoff (3 sigma), shared by binning and compositing
SH_C0 = 0.28209479177387814

_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; fx is derived from the horizontal FOV, pixels square."""

    width: int = 80
    height: int = 60
    fov_x: float = 90.0  # degrees
    near: float = 0.05
    far: float = 20.0

    @property
    def fx(self) -> float:
        return self.width / (2.0 * math.tan(math.radians(self.fov_x) / 2.0))

    @property
    def fy(self) -> float:
        return self.fx

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


@dataclass(frozen=True)
class Pose:
    """World-to-camera rotation (quaternion, w-first) and camera center in world."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation))):
            raise ValueError("non-finite pose")
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("pose quaternion must be unit-norm")


@dataclass(frozen=True)
class ProjectedGaussians:
    """Screen-space Gaussians for one view (struct of arrays).

    cov2d is packed (a, b, c) for the symmetric matrix [[a, b], [b, c]].
    source_index maps each entry back to its Gaussian in the cloud.
    """

    mean2d: np.ndarray        # (M, 2) pixels
    cov2d: np.ndarray         # (M, 3)
    depth: np.ndarray         # (M,) camera-frame z
    color: np.ndarray         # (M, 3)
    opacity: np.ndarray       # (M,)
    source_index: np.ndarray  # (M,) int64

    @property
    def count(self) -> int:
        return self.mean2d.shape[0]


@dataclass(frozen=True)
class TileBins:
    """CSR per-tile lists of projected-Gaussian indices, depth-sorted front-to-back."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (tiles_x*tiles_y + 1,)
    indices: np.ndarray  # indices into the ProjectedGaussians arrays

    def tile(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.indices[self.offsets[t]:self.offsets[t + 1]]

    def tile_sets(self) -> list[set]:
        return [set(self.tile(t % self.tiles_x, t // self.tiles_x).tolist())
                for t in range(self.tiles_x * self.tiles_y)]


def eval_sh_colors(cloud: GaussianCloud, cam_center: np.ndarray) -> np.ndarray:
    """View-dependent RGB from SH coefficients, evaluated along each view ray."""
    c = SH_C0 * cloud.sh_dc
    if cloud.sh_rest is not None:
        d = cloud.means - cam_center[None, :]
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        sh = cloud.sh_rest.reshape(-1, 3, 15)  # channel-major f_rest layout
        c = c + _SH_C1 * (-y * sh[:, :, 0] + z * sh[:, :, 1] - x * sh[:, :, 2])
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        c = c + (_SH_C2[0] * xy * sh[:, :, 3]
                 + _SH_C2[1] * yz * sh[:, :, 4]
                 + _SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, :, 5]
                 + _SH_C2[3] * xz * sh[:, :, 6]
                 + _SH_C2[4] * (xx - yy) * sh[:, :, 7])
        c = c + (_SH_C3[0] * y * (3.0 * xx - yy) * sh[:, :, 8]
                 + _SH_C3[1] * xy * z * sh[:, :, 9]
                 + _SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, :, 10]
                 + _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, :, 11]
                 + _SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, :, 12]
                 + _SH_C3[5] * z * (xx - yy) * sh[:, :, 13]
                 + _SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, :, 14])
    return np.clip(c + 0.5, 0.0, None)


def project(cloud: GaussianCloud, cam: CameraModel, pose: Pose,
            cov3d: np.ndarray | None = None) -> ProjectedGaussians:
    """EWA perspective projection of every Gaussian in front of the near plane."""
    W = quat_to_rot(pose.rotation)
    p_cam = (cloud.means - pose.translation) @ W.T
    keep = p_cam[:, 2] > cam.near
    idx = np.nonzero(keep)[0]
    p = p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    if cov3d is None:
        cov3d = cloud.covariances()
    sigma_cam = np.einsum("ij,njk,lk->nil", W, cov3d[idx], W)

    # 2x3 perspective Jacobian rows: d(u,v)/d(x,y,z)
    J = np.zeros((idx.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    cov2d_m = np.einsum("nij,njk,nlk->nil", J, sigma_cam, J)
    cov2d = np.stack([cov2d_m[:, 0, 0] + BLUR_FLOOR,
                      cov2d_m[:, 0, 1],
                      cov2d_m[:, 1, 1] + BLUR_FLOOR], axis=1)

    colors = eval_sh_colors(cloud, pose.translation)[idx]
    return ProjectedGaussians(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=z.copy(),
        color=np.ascontiguousarray(colors),
        opacity=cloud.opacities[idx],
        source_index=idx.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# tile binning


@njit(cache=True)
def _square_ranges(mean2d, cov2d, tiles_x, tiles_y, tile_size):
    m = mean2d.shape[0]
    ranges = np.empty((m, 4), dtype=np.int64)
    for i in range(m):
        a, b, c = cov2d[i, 0], cov2d[i, 1], cov2d[i, 2]
        lam_max = 0.5 * (a + c) + 0.5 * math.sqrt(max((a - c) * (a - c) + 4.0 * b * b, 0.0))
        r = math.ceil(3.0 * math.sqrt(max(lam_max, 0.0)))
        tx0 = max(int(math.floor((mean2d[i, 0] - r) / tile_size)), 0)
        tx1 = min(int(math.floor((mean2d[i, 0] + r) / tile_size)), tiles_x - 1)
        ty0 = max(int(math.floor((mean2d[i, 1] - r) / tile_size)), 0)
        ty1 = min(int(math.floor((mean2d[i, 1] + r) / tile_size)), tiles_y - 1)
        ranges[i, 0], ranges[i, 1], ranges[i, 2], ranges[i, 3] = tx0, tx1, ty0, ty1
    return ranges


@njit(cache=True)
def _emit_square_pairs(ranges, tiles_x):
    m = ranges.shape[0]
    total = 0
    for i in range(m):
        nx = ranges[i, 1] - ranges[i, 0] + 1
        ny = ranges[i, 3] - ranges[i, 2] + 1
        if nx > 0 and ny > 0:
            total += nx * ny
    tiles = np.empty(total, dtype=np.int64)
    gauss = np.empty(total, dtype=np.int64)
    k = 0
    for i in range(m):
        tx0, tx1, ty0, ty1 = ranges[i, 0], ranges[i, 1], ranges[i, 2], ranges[i, 3]
        if tx1 < tx0 or ty1 < ty0:
            continue
        for ty in range(ty0, ty1 + 1):
            base = ty * tiles_x
            for tx in range(tx0, tx1 + 1):
                tiles[k] = base + tx
                gauss[k] = i
                k += 1
    return tiles, gauss


@njit(cache=True, inline="always")
def _rect_min_quadform(mx, my, x0, x1, y0, y1, A, B, C):
    """Min of d^T [[A,B],[B,C]] d over the rectangle, d relative to (mx, my)."""
    if x0 <= mx <= x1 and y0 <= my <= y1:
        return 0.0
    best = 1e300
    # vertical edges: x fixed, minimize over y
    for xe in (x0, x1):
        dx = xe - mx
        ys = -B * dx / C if C > 0 else my
        yy = min(max(my + ys, y0), y1)
        dy = yy - my
        q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        if q < best:
            best = q
    # horizontal edges: y fixed, minimize over x
    for ye in (y0, y1):
        dy = ye - my
        xs = -B * dy / A if A > 0 else mx
        xx = min(max(mx + xs, x0), x1)
        dx = xx - mx
        q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        if q < best:
            best = q
    return best


@njit(cache=True)
def _emit_exact_pairs(mean2d, cov2d, opacity, tiles_x, tiles_y, tile_size, eps,
                      square_ranges):
    m = mean2d.shape[0]
    max_pairs = 0
    for i in range(m):
        nx = square_ranges[i, 1] - square_ranges[i, 0] + 1
        ny = square_ranges[i, 3] - square_ranges[i, 2] + 1
        if nx > 0 and ny > 0:
            max_pairs += nx * ny
    tiles = np.empty(max_pairs, dtype=np.int64)
    gauss = np.empty(max_pairs, dtype=np.int64)
    k = 0
    for i in range(m):
        o = opacity[i]
        if o <= eps:
            continue
        a, b, c = cov2d[i, 0], cov2d[i, 1], cov2d[i, 2]
        det = a * c - b * b
        if det <= 1e-12:
            continue
        # level set q <= t, capped at the 3-sigma footprint used in compositing
        t = 2.0 * math.log(o / eps)
        if t > FOOTPRINT_Q:
            t = FOOTPRINT_Q
        A = c / det
        B = -b / det
        C = a / det
        mx, my = mean2d[i, 0], mean2d[i, 1]
        hx = math.sqrt(t * a)
        hy = math.sqrt(t * c)
        tx0 = max(int(math.floor((mx - hx) / tile_size)), square_ranges[i, 0])
        tx1 = min(int(math.floor((mx + hx) / tile_size)), square_ranges[i, 1])
        ty0 = max(int(math.floor((my - hy) / tile_size)), square_ranges[i, 2])
        ty1 = min(int(math.floor((my + hy) / tile_size)), square_ranges[i, 3])
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                q = _rect_min_quadform(mx, my,
                                       tx * tile_size, (tx + 1) * tile_size,
                                       ty * tile_size, (ty + 1) * tile_size,
                                       A, B, C)
                if q <= t:
                    tiles[k] = ty * tiles_x + tx
                    gauss[k] = i
                    k += 1
    return tiles[:k], gauss[:k]


def _pairs_to_bins(tiles: np.ndarray, gauss: np.ndarray, depth: np.ndarray,
                   tile_size: int, tiles_x: int, tiles_y: int) -> TileBins:
    order = np.lexsort((gauss, depth[gauss], tiles))
    tiles_s = tiles[order]
    gauss_s = gauss[order]
    counts = np.bincount(tiles_s, minlength=tiles_x * tiles_y)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TileBins(tile_size, tiles_x, tiles_y, offsets, gauss_s)


def _grid(cam: CameraModel, tile_size: int) -> tuple[int, int]:
    return (cam.width + tile_size - 1) // tile_size, (cam.height + tile_size - 1) // tile_size


def tile_bins_square(projected: ProjectedGaussians, cam: CameraModel,
                     tile_size: int = 16) -> TileBins:
    """Bin by the axis-aligned square of half-width ceil(3*sqrt(lambda_max))."""
    tiles_x, tiles_y = _grid(cam, tile_size)
    ranges = _square_ranges(projected.mean2d, projected.cov2d, tiles_x, tiles_y, tile_size)
    tiles, gauss = _emit_square_pairs(ranges, tiles_x)
    return _pairs_to_bins(tiles, gauss, projected.depth, tile_size, tiles_x, tiles_y)


def tile_bins_exact(projected: ProjectedGaussians, cam: CameraModel,
                    tile_size: int = 16, eps: float = ALPHA_SKIP) -> TileBins:
    """Bin only to tiles the projected level-set ellipse actually overlaps."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    tiles_x, tiles_y = _grid(cam, tile_size)
    ranges = _square_ranges(projected.mean2d, projected.cov2d, tiles_x, tiles_y, tile_size)
    tiles, gauss = _emit_exact_pairs(projected.mean2d, projected.cov2d,
                                     projected.opacity, tiles_x, tiles_y,
                                     tile_size, eps, ranges)
    return _pairs_to_bins(tiles, gauss, projected.depth, tile_size, tiles_x, tiles_y)


# ---------------------------------------------------------------------------
# compositing


@njit(cache=True)
def _composite(mean2d, cov2d, depth, color, opacity, offsets, indices,
               tile_size, tiles_x, tiles_y, width, height,
               bg, far, want_rgb, want_depth):
    rgb = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    for tid in range(tiles_x * tiles_y):
        lo, hi = offsets[tid], offsets[tid + 1]
        tx = tid % tiles_x
        ty = tid // tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            for px in range(px0, px1):
                cx = px + 0.5
                cy = py + 0.5
                T = 1.0
                r = g = b_ = 0.0
                dsum = 0.0
                asum = 0.0
                for k in range(lo, hi):
                    i = indices[k]
                    a2, b2, c2 = cov2d[i, 0], cov2d[i, 1], cov2d[i, 2]
                    det = a2 * c2 - b2 * b2
                    if det <= 1e-12:
                        continue
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    q = (c2 * dx * dx - 2.0 * b2 * dx * dy + a2 * dy * dy) / det
                    if q > FOOTPRINT_Q or q < 0.0:
                        continue
                    alpha = opacity[i] * math.exp(-0.5 * q)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    w = alpha * T
                    if want_rgb:
                        r += w * color[i, 0]
                        g += w * color[i, 1]
                        b_ += w * color[i, 2]
                    if want_depth:
                        dsum += w * depth[i]
                    asum += w
                    T *= 1.0 - alpha
                    if T < T_EARLY_EXIT:
                        break
                if want_rgb:
                    rgb[py, px, 0] = r + T * bg[0]
                    rgb[py, px, 1] = g + T * bg[1]
                    rgb[py, px, 2] = b_ + T * bg[2]
                if want_depth:
                    if asum > 0.0:
                        dep[py, px] = dsum / max(asum, 1e-6)
                    else:
                        dep[py, px] = far
    return rgb, dep


@njit(cache=True)
def _importance_accumulate(mean2d, cov2d, depth, color, opacity, source_index,
                           offsets, indices, tile_size, tiles_x, tiles_y,
                           width, height, scores):
    max_bin = 0
    for tid in range(tiles_x * tiles_y):
        n = offsets[tid + 1] - offsets[tid]
        if n > max_bin:
            max_bin = n
    alphas = np.empty(max_bin)
    trans = np.empty(max_bin)
    clamped = np.empty(max_bin, dtype=np.uint8)
    which = np.empty(max_bin, dtype=np.int64)
    for tid in range(tiles_x * tiles_y):
        lo, hi = offsets[tid], offsets[tid + 1]
        if hi == lo:
            continue
        tx = tid % tiles_x
        ty = tid // tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            for px in range(px0, px1):
                cx = px + 0.5
                cy = py + 0.5
                # forward: record surviving contributions and their transmittance
                T = 1.0
                m = 0
                for k in range(lo, hi):
                    i = indices[k]
                    a2, b2, c2 = cov2d[i, 0], cov2d[i, 1], cov2d[i, 2]
                    det = a2 * c2 - b2 * b2
                    if det <= 1e-12:
                        continue
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    q = (c2 * dx * dx - 2.0 * b2 * dx * dy + a2 * dy * dy) / det
                    if q > FOOTPRINT_Q or q < 0.0:
                        continue
                    raw = opacity[i] * math.exp(-0.5 * q)
                    alpha = raw
                    cl = 0
                    if raw > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                        cl = 1
                    if alpha < ALPHA_SKIP:
                        continue
                    alphas[m] = alpha
                    trans[m] = T
                    clamped[m] = cl
                    which[m] = i
                    m += 1
                    T *= 1.0 - alpha
                    if T < T_EARLY_EXIT:
                        break
                # backward: suffix contribution behind each entry, back to front
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                for k in range(m - 1, -1, -1):
                    i = which[k]
                    a = alphas[k]
                    Ti = trans[k]
                    if clamped[k] == 0:
                        f = a / (1.0 - a)
                        g0 = a * Ti * color[i, 0] - f * s0
                        g1 = a * Ti * color[i, 1] - f * s1
                        g2 = a * Ti * color[i, 2] - f * s2
                        scores[source_index[i]] += g0 * g0 + g1 * g1 + g2 * g2
                    s0 += a * Ti * color[i, 0]
                    s1 += a * Ti * color[i, 1]
                    s2 += a * Ti * color[i, 2]
    return scores


# ---------------------------------------------------------------------------
# public rendering API


def _bins_for(projected, cam, binning: str, tile_size: int) -> TileBins:
    if binning == "square":
        return tile_bins_square(projected, cam, tile_size)
    if binning == "exact":
        return tile_bins_exact(projected, cam, tile_size)
    raise ValueError(f"unknown binning mode: {binning}")


def render(cloud: GaussianCloud, cam: CameraModel, pose: Pose,
           mode: str = "rgb", binning: str = "exact", tile_size: int = 16,
           background=(0.0, 0.0, 0.0), cov3d: np.ndarray | None = None):
    """Render one view. mode: rgb | depth | rgbd. Returns image(s)."""
    if mode not in ("rgb", "depth", "rgbd"):
        raise ValueError(f"unknown render mode: {mode}")
    projected = project(cloud, cam, pose, cov3d=cov3d)
    bins = _bins_for(projected, cam, binning, tile_size)
    want_rgb = mode in ("rgb", "rgbd")
    want_depth = mode in ("depth", "rgbd")
    rgb, dep = _composite(
        projected.mean2d, projected.cov2d, projected.depth,
        projected.color, projected.opacity,
        bins.offsets, bins.indices, tile_size, bins.tiles_x, bins.tiles_y,
        cam.width, cam.height, np.asarray(background, dtype=np.float64),
        cam.far, want_rgb, want_depth)
    if mode == "rgb":
        return rgb
    if mode == "depth":
        return dep
    return rgb, dep


def render_batch(clouds, cams, poses, mode: str = "rgb", binning: str = "exact",
                 tile_size: int = 16, background=(0.0, 0.0, 0.0)):
    """Render N views; entry i equals render() on (clouds[i], cams[i], poses[i]).

    clouds may be a single shared GaussianCloud or a sequence of clouds.
    """
    cams = list(cams)
    poses = list(poses)
    if len(cams) != len(poses):
        raise ValueError(f"{len(cams)} cameras vs {len(poses)} poses")
    if isinstance(clouds, GaussianCloud):
        clouds = [clouds] * len(cams)
    else:
        clouds = list(clouds)
        if len(clouds) != len(cams):
            raise ValueError(f"{len(clouds)} clouds vs {len(cams)} cameras")
    cov_cache: dict[int, np.ndarray] = {}
    out = []
    for cloud, cam, pose in zip(clouds, cams, poses):
        key = id(cloud)
        if key not in cov_cache:
            cov_cache[key] = cloud.covariances()
        out.append(render(cloud, cam, pose, mode=mode, binning=binning,
                          tile_size=tile_size, background=background,
                          cov3d=cov_cache[key]))
    if mode == "rgbd":
        return (np.stack([o[0] for o in out]), np.stack([o[1] for o in out]))
    return np.stack(out)


def importance_scores(cloud: GaussianCloud, cams, poses,
                      binning: str = "exact", tile_size: int = 16) -> np.ndarray:
    """Squared image gradient w.r.t. a per-Gaussian alpha multiplier at 1.

    Summed over views, pixels and channels; the analytic backward of the
    compositing sum, accumulated back-to-front per pixel.
    """
    cams = list(cams)
    poses = list(poses)
    if len(cams) != len(poses) or not cams:
        raise ValueError("need >= 1 matching camera/pose sample views")
    scores = np.zeros(cloud.count)
    cov3d = cloud.covariances()
    for cam, pose in zip(cams, poses):
        projected = project(cloud, cam, pose, cov3d=cov3d)
        bins = _bins_for(projected, cam, binning, tile_size)
        _importance_accumulate(
            projected.mean2d, projected.cov2d, projected.depth,
            projected.color, projected.opacity, projected.source_index,
            bins.offsets, bins.indices, tile_size, bins.tiles_x, bins.tiles_y,
            cam.width, cam.height, scores)
    return scores


# ---------------------------------------------------------------------------
# naive oracle renderer (independent reference; no tiling, no early exit)


def render_naive(cloud: GaussianCloud, cam: CameraModel, pose: Pose,
                 mode: str = "rgb", background=(0.0, 0.0, 0.0),
                 alpha_multipliers: np.ndarray | None = None):
    """Reference renderer: global depth sort, every Gaussian against every pixel.

    alpha_multipliers optionally scales each cloud Gaussian's alpha (clamp
    applied after scaling); used by finite-difference importance checks.
    """
    projected = project(cloud, cam, pose)
    order = np.lexsort((projected.source_index, projected.depth))
    xs = np.arange(cam.width) + 0.5
    ys = np.arange(cam.height) + 0.5
    PX, PY = np.meshgrid(xs, ys)
    T = np.ones((cam.height, cam.width))
    rgb = np.zeros((cam.height, cam.width, 3))
    dsum = np.zeros((cam.height, cam.width))
    asum = np.zeros((cam.height, cam.width))
    for i in order:
        a2, b2, c2 = projected.cov2d[i]
        det = a2 * c2 - b2 * b2
        if det <= 1e-12:
            continue
        dx = PX - projected.mean2d[i, 0]
        dy = PY - projected.mean2d[i, 1]
        q = (c2 * dx * dx - 2.0 * b2 * dx * dy + a2 * dy * dy) / det
        alpha = projected.opacity[i] * np.exp(-0.5 * q)
        if alpha_multipliers is not None:
            alpha = alpha * alpha_multipliers[projected.source_index[i]]
        alpha = np.minimum(alpha, ALPHA_CLAMP)
        alpha[(q > FOOTPRINT_Q) | (alpha < ALPHA_SKIP)] = 0.0
        w = alpha * T
        rgb += w[:, :, None] * projected.color[i][None, None, :]
        dsum += w * projected.depth[i]
        asum += w
        T = T * (1.0 - alpha)
    rgb += T[:, :, None] * np.asarray(background)[None, None, :]
    dep = np.where(asum > 0.0, dsum / np.maximum(asum, 1e-6), cam.far)
    if mode == "rgb":
        return rgb
    if mode == "depth":
        return dep
    if mode == "rgbd":
        return rgb, dep
    raise ValueError(f"unknown render mode: {mode}")
