"""Gaussian splat scenes: PLY I/O, world transforms, randomization and pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import quat_mul, quat_normalize, quat_to_rot

# de-facto 3DGS binary PLY property layout
_REQUIRED_PROPS = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
_SH_REST = 45


class PlyParseError(ValueError):
    pass


class PlyLoadError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianCloud:
    """An immutable set of 3D Gaussian primitives.

    Scales are stored in log-space and opacities as logits, matching how
    3DGS PLY files store them in the wild; activations are applied on use.
    """

    means: np.ndarray          # (N, 3) world-frame centers, meters
    scales: np.ndarray         # (N, 3) log-scales
    rotations: np.ndarray      # (N, 4) unit quaternions (w, x, y, z)
    opacity_logits: np.ndarray # (N,)
    sh_dc: np.ndarray          # (N, 3) DC spherical-harmonic coefficients
    sh_rest: np.ndarray | None = None  # (N, 45) higher-order SH, optional

    def __post_init__(self):
        n = self.means.shape[0]
        for name in ("scales", "rotations", "opacity_logits", "sh_dc"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} entries, expected {n}")
        if self.sh_rest is not None and self.sh_rest.shape[0] != n:
            raise ValueError("sh_rest count mismatch")

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> np.ndarray:
        """World-space 3x3 covariances, R S S^T R^T."""
        R = quat_to_rot(self.rotations)
        s = np.exp(self.scales)
        RS = R * s[:, None, :]
        return RS @ RS.transpose(0, 2, 1)


@dataclass(frozen=True)
class SceneTransform:
    """Similarity transform aligning a reconstructed scene with the sim world."""

    scale: float = 1.0
    rotation: np.ndarray = None  # unit quaternion (w, x, y, z)
    translation: np.ndarray = None

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(
            self,
            "rotation",
            quat_normalize(self.rotation if self.rotation is not None else [1.0, 0, 0, 0]),
        )
        object.__setattr__(
            self,
            "translation",
            np.asarray(
                self.translation if self.translation is not None else [0.0, 0, 0],
                dtype=np.float64,
            ),
        )

    def inverse(self) -> "SceneTransform":
        Rinv = self.rotation * np.array([1.0, -1, -1, -1])
        tinv = -quat_to_rot(Rinv) @ self.translation / self.scale
        return SceneTransform(1.0 / self.scale, Rinv, tinv)


@dataclass(frozen=True)
class ColorRandomization:
    """Affine DC-color jitter: C' = alpha * C + beta + eps, eps ~ N(0, sigma^2)."""

    alpha: float = 1.0
    beta: float = 0.0
    noise_sigma: float = 0.0

    @staticmethod
    def sample(rng: np.random.Generator,
               alpha_range=(0.8, 1.3),
               beta_range=(-0.05, 0.05),
               noise_sigma=0.025) -> "ColorRandomization":
        return ColorRandomization(
            alpha=float(rng.uniform(*alpha_range)),
            beta=float(rng.uniform(*beta_range)),
            noise_sigma=float(noise_sigma),
        )


def _parse_ply_header(f) -> tuple[list[str], int]:
    magic = f.readline().strip()
    if magic != b"ply":
        raise PlyParseError("not a PLY file")
    fmt = f.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise PlyParseError("expected binary little-endian PLY")
    props: list[str] = []
    count = None
    in_vertex = False
    while True:
        line = f.readline()
        if not line:
            raise PlyParseError("unterminated header")
        parts = line.strip().decode("ascii").split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise PlyParseError(f"non-float property: {parts[2]}")
            props.append(parts[2])
        elif parts[0] == "end_header":
            break
    if count is None:
        raise PlyParseError("missing property: x (no vertex element)")
    return props, count


def _renormalize(rots: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Normalize quaternion rows, leaving already-unit rows bit-identical so
    that a load/save round trip is idempotent despite float32 storage."""
    rots = rots.copy()
    norms = np.linalg.norm(rots, axis=-1)
    off = np.abs(norms - 1.0) > tol
    if off.any():
        rots[off] = rots[off] / norms[off, None]
    return rots


def load_ply(path) -> GaussianCloud:
    """Load a 3DGS binary PLY; quaternions are renormalized on load."""
    with open(path, "rb") as f:
        props, count = _parse_ply_header(f)
        for p in _REQUIRED_PROPS:
            if p not in props:
                raise PlyParseError(f"missing property: {p}")
        data = np.fromfile(f, dtype=np.dtype([(p, "<f4") for p in props]), count=count)
    if data.shape[0] != count:
        raise PlyParseError(f"expected {count} vertices, file truncated")

    def cols(names):
        return np.stack([data[n].astype(np.float64) for n in names], axis=1)

    means = cols(["x", "y", "z"])
    sh_dc = cols([f"f_dc_{i}" for i in range(3)])
    opacity = data["opacity"].astype(np.float64)
    scales = cols([f"scale_{i}" for i in range(3)])
    rots = cols([f"rot_{i}" for i in range(4)])
    sh_rest = None
    if all(f"f_rest_{i}" in props for i in range(_SH_REST)):
        sh_rest = cols([f"f_rest_{i}" for i in range(_SH_REST)])

    fields = [means, sh_dc, opacity[:, None], scales, rots]
    if sh_rest is not None:
        fields.append(sh_rest)
    stacked = np.concatenate(fields, axis=1)
    bad = ~np.isfinite(stacked).all(axis=1)
    if bad.any():
        raise PlyLoadError(f"non-finite values at Gaussian index {int(np.argmax(bad))}")

    return GaussianCloud(
        means=means,
        scales=scales,
        rotations=_renormalize(rots),
        opacity_logits=opacity,
        sh_dc=sh_dc,
        sh_rest=sh_rest,
    )


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write a 3DGS binary PLY in the layout load_ply reads."""
    props = ["x", "y", "z", "nx", "ny", "nz"] + [f"f_dc_{i}" for i in range(3)]
    if cloud.sh_rest is not None:
        props += [f"f_rest_{i}" for i in range(_SH_REST)]
    props += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]

    n = cloud.count
    data = np.zeros(n, dtype=np.dtype([(p, "<f4") for p in props]))
    for i, name in enumerate("xyz"):
        data[name] = cloud.means[:, i]
    for i in range(3):
        data[f"f_dc_{i}"] = cloud.sh_dc[:, i]
    if cloud.sh_rest is not None:
        for i in range(_SH_REST):
            data[f"f_rest_{i}"] = cloud.sh_rest[:, i]
    data["opacity"] = cloud.opacity_logits
    for i in range(3):
        data[f"scale_{i}"] = cloud.scales[:, i]
    for i in range(4):
        data[f"rot_{i}"] = cloud.rotations[:, i]

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        data.tofile(f)


def apply_transform(cloud: GaussianCloud, t: SceneTransform) -> GaussianCloud:
    """Similarity-transform a cloud: means, log-scales and orientations."""
    R = quat_to_rot(t.rotation)
    means = t.scale * cloud.means @ R.T + t.translation
    scales = cloud.scales + math.log(t.scale)
    # product of unit quaternions is unit to machine precision; skipping the
    # renormalization keeps the identity transform bitwise exact
    rotations = quat_mul(t.rotation, cloud.rotations)
    return replace(cloud, means=means, scales=scales, rotations=rotations)


def randomize_colors(cloud: GaussianCloud, cr: ColorRandomization,
                     rng: np.random.Generator) -> GaussianCloud:
    """Jitter DC color coefficients; higher-order SH is left untouched."""
    eps = rng.normal(0.0, cr.noise_sigma, size=cloud.sh_dc.shape) if cr.noise_sigma > 0 else 0.0
    return replace(cloud, sh_dc=cr.alpha * cloud.sh_dc + cr.beta + eps)


def extract_point_cloud(cloud: GaussianCloud, opacity_min: float = 0.0) -> np.ndarray:
    """Means of all Gaussians with opacity >= opacity_min, for collision geometry."""
    if not 0.0 <= opacity_min < 1.0:
        raise ValueError("opacity_min must be in [0, 1)")
    return cloud.means[cloud.opacities >= opacity_min].copy()


def prune(cloud: GaussianCloud, scores: np.ndarray, keep_fraction: float) -> GaussianCloud:
    """Keep the ceil(keep_fraction * N) highest-scoring Gaussians, stable order."""
    if keep_fraction <= 0 or keep_fraction > 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (cloud.count,):
        raise ValueError("scores length must equal cloud count")
    k = math.ceil(keep_fraction * cloud.count)
    # stable sort on -score keeps the lower original index first among ties
    order = np.argsort(-scores, kind="stable")[:k]
    keep = np.sort(order)
    return GaussianCloud(
        means=cloud.means[keep],
        scales=cloud.scales[keep],
        rotations=cloud.rotations[keep],
        opacity_logits=cloud.opacity_logits[keep],
        sh_dc=cloud.sh_dc[keep],
        sh_rest=None if cloud.sh_rest is None else cloud.sh_rest[keep],
    )


def random_cloud(n: int, rng: np.random.Generator,
                 bounds=((-3.0, -3.0, 0.0), (3.0, 3.0, 2.0)),
                 scale_range=(0.01, 0.08),
                 opacity_range=(0.2, 0.95)) -> GaussianCloud:
    """Synthetic scene: random Gaussians in a box (test/benchmark fixture)."""
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    means = rng.uniform(lo, hi, size=(n, 3))
    scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    rotations = quat_normalize(rng.normal(size=(n, 4)))
    op = rng.uniform(*opacity_range, size=n)
    logits = np.log(op / (1 - op))
    # DC coefficients roughly covering [0, 1] colors after the SH constant + 0.5
    sh_dc = rng.uniform(-1.5, 1.5, size=(n, 3))
    return GaussianCloud(means, scales, rotations, logits, sh_dc)


def pillar_forest(rng: np.random.Generator, n_pillars: int = 12,
                  area=((-4.0, -3.0), (4.0, 3.0)), height: float = 2.0,
                  gaussians_per_pillar: int = 80, radius: float = 0.12) -> GaussianCloud:
    """Synthetic scene: vertical pillars of Gaussians scattered over a floor area."""
    (x0, y0), (x1, y1) = area
    parts = []
    for _ in range(n_pillars):
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        z = rng.uniform(0.0, height, size=gaussians_per_pillar)
        ang = rng.uniform(0, 2 * np.pi, size=gaussians_per_pillar)
        r = radius * np.sqrt(rng.uniform(0, 1, size=gaussians_per_pillar))
        parts.append(np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang), z], axis=1))
    means = np.concatenate(parts, axis=0)
    n = means.shape[0]
    scales = np.log(rng.uniform(0.03, 0.09, size=(n, 3)))
    rotations = quat_normalize(rng.normal(size=(n, 4)))
    op = rng.uniform(0.7, 0.98, size=n)
    logits = np.log(op / (1 - op))
    sh_dc = rng.uniform(-1.0, 1.0, size=(n, 3))
    return GaussianCloud(means, scales, rotations, logits, sh_dc)
