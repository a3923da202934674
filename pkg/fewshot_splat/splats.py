"""
Splat scene representation: anisotropic 3D Gaussians with opacity and
degree-1 spherical-harmonic color, stored in unconstrained parameters
(log scales, raw quaternions, opacity logits).
"""
import warnings
from dataclasses import dataclass

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree

from fewshot_splat.config import PLY_BASE_FIELDS, PLY_TAIL_FIELDS, PLY_REQUIRED_FIELDS
from fewshot_splat.errors import InitializationError, InputError, UnsupportedFormatError
from fewshot_splat.scene_io import Camera, SfmPoint

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_COEFFS = 4
INITIAL_OPACITY = 0.1
MIN_NEIGHBOR_DISTANCE = 1e-7


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass(eq=False)
class SplatSet:
    """
    Structure-of-arrays splat storage.

    positions (N, 3), log_scales (N, 3), rotations (N, 4) as (w, x, y, z),
    opacity_logits (N,), sh (N, 4, 3) with coefficient index first.
    """
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, SH_COEFFS, 3)
        lengths = {len(a) for a in self.arrays().values()}
        if len(lengths) > 1:
            raise InputError(f"splat arrays disagree in length: {sorted(lengths)}")

    @classmethod
    def empty(cls) -> "SplatSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, SH_COEFFS, 3)))

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.count

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }

    def copy(self) -> "SplatSet":
        return SplatSet(**{k: v.copy() for k, v in self.arrays().items()})

    def select(self, keep: np.ndarray) -> "SplatSet":
        return SplatSet(**{k: v[keep] for k, v in self.arrays().items()})

    def extend(self, other: "SplatSet") -> "SplatSet":
        return SplatSet(**{k: np.concatenate([v, getattr(other, k)]) for k, v in self.arrays().items()})

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations = self.rotations / np.maximum(norms, 1e-12)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays().values())

    def equals(self, other: "SplatSet") -> bool:
        return all(np.array_equal(v, getattr(other, k)) for k, v in self.arrays().items())


def sh_basis(directions: np.ndarray) -> np.ndarray:
    """Degree-1 real SH basis values (N, 4) for unit view directions (N, 3)."""
    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    return np.stack([np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=1)


def eval_sh(sh: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """
    RGB of each splat seen along `directions`, shifted by 0.5 and clamped at 0.
    With zero degree-1 coefficients the result is view-independent.
    """
    raw = np.einsum("nk,nkc->nc", sh_basis(directions), sh) + 0.5
    return np.maximum(raw, 0.0)


def _neighbor_scales(positions: np.ndarray) -> np.ndarray:
    """Log of the mean distance to the (up to) 3 nearest neighbours of each point."""
    count = len(positions)
    if count == 1:
        return np.zeros((1, 3))
    k = min(4, count)
    distances, _ = cKDTree(positions).query(positions, k=k)
    mean = np.maximum(distances[:, 1:].mean(axis=1), MIN_NEIGHBOR_DISTANCE)
    return np.repeat(np.log(mean)[:, None], 3, axis=1)


def splats_from_positions(positions: np.ndarray, colors: np.ndarray) -> SplatSet:
    """Isotropic splats at `positions` with 3-NN scales, identity rotation and opacity 0.1."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    count = len(positions)
    if count == 0:
        raise InitializationError("cannot initialize splats from an empty point set")
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((count, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh(colors)
    return SplatSet(
        positions=positions.copy(),
        log_scales=_neighbor_scales(positions),
        rotations=rotations,
        opacity_logits=np.full(count, logit(INITIAL_OPACITY)),
        sh=sh,
    )


def _track_color(point: SfmPoint, images: dict[int, np.ndarray]) -> np.ndarray | None:
    samples = []
    for image_id, (x, y) in point.track:
        image = images.get(image_id)
        if image is None:
            continue
        px, py = int(np.rint(x)), int(np.rint(y))
        if 0 <= py < image.shape[0] and 0 <= px < image.shape[1]:
            samples.append(image[py, px, :3])
    return np.mean(samples, axis=0) if samples else None


def init_from_points(points: list[SfmPoint], images: dict[int, np.ndarray] | None = None) -> SplatSet:
    """
    One splat per SfM point.

    Color comes from the stored point color, else the mean of the training
    images at the track observations, else mid-gray.

    Args:
        points: SfM points (typically the k-shot filtered set)
        images: Training images by camera id, for points without a stored color
    """
    if not points:
        raise InitializationError("cannot initialize splats from an empty point list")
    images = images or {}
    colors = np.full((len(points), 3), 0.5)
    for i, point in enumerate(points):
        if point.color is not None:
            colors[i] = np.asarray(point.color, dtype=np.float64) / 255.0
        else:
            sampled = _track_color(point, images)
            if sampled is not None:
                colors[i] = sampled
    return splats_from_positions(np.stack([p.position for p in points]), colors)


def unproject(camera: Camera, depth: np.ndarray, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """
    World points of every stride-th pixel with positive depth.

    Returns:
        (points (M, 3), pixels (M, 2) as (x, y))
    """
    height, width = depth.shape
    ys, xs = np.meshgrid(np.arange(0, height, stride), np.arange(0, width, stride), indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    d = np.asarray(depth, dtype=np.float64)[ys, xs]
    valid = d > 0
    xs, ys, d = xs[valid], ys[valid], d[valid]
    cam = np.stack([(xs - camera.cx) / camera.fx * d, (ys - camera.cy) / camera.fy * d, d], axis=1)
    world = (cam - camera.translation) @ camera.rotation
    return world, np.stack([xs, ys], axis=1)


def init_from_depth(priors, cameras: list[Camera], stride: int = 1,
                    images: dict[int, np.ndarray] | None = None) -> SplatSet:
    """
    Splats from unprojected prior depth, colored by the training image pixel
    (mid-gray when the image is not supplied).
    """
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    by_id = {camera.id: camera for camera in cameras}
    images = images or {}
    positions, colors = [], []
    for prior in priors:
        camera = by_id.get(prior.view_id)
        if camera is None:
            raise InputError(f"no camera for depth prior of view {prior.view_id}")
        world, pixels = unproject(camera, prior.aligned, stride)
        positions.append(world)
        image = images.get(prior.view_id)
        if image is not None:
            colors.append(image[pixels[:, 1], pixels[:, 0], :3])
        else:
            colors.append(np.full((len(world), 3), 0.5))
    if not positions:
        raise InitializationError("no depth priors to unproject")
    return splats_from_positions(np.concatenate(positions), np.concatenate(colors))


def _ply_dtype(rest_count: int) -> list[tuple[str, str]]:
    names = PLY_BASE_FIELDS + [f"f_rest_{i}" for i in range(rest_count)] + PLY_TAIL_FIELDS
    return [(name, "f4") for name in names]


def export_ply(splats: SplatSet, path) -> None:
    """
    Binary little-endian PLY in the common splat-viewer layout:
    x y z nx ny nz f_dc_0..2 f_rest_0..8 opacity scale_0..2 rot_0..3 (float32).
    f_rest is channel-major, matching viewers that expect it.
    """
    count = splats.count
    rest = splats.sh[:, 1:, :].transpose(0, 2, 1).reshape(count, -1)
    columns = np.concatenate([
        splats.positions,
        np.zeros((count, 3)),
        splats.sh[:, 0, :],
        rest,
        splats.opacity_logits[:, None],
        splats.log_scales,
        splats.rotations,
    ], axis=1)
    dtype = _ply_dtype(rest.shape[1])
    vertices = np.empty(count, dtype=dtype)
    for i, (name, _) in enumerate(dtype):
        vertices[name] = columns[:, i]
    PlyData([PlyElement.describe(vertices, "vertex")], text=False, byte_order="<").write(str(path))


def import_ply(path) -> SplatSet:
    """
    Read a splat PLY. Higher SH degrees are truncated to degree 1 with a warning.
    """
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise InputError(f"PLY file not found: {path}")
    if "vertex" not in [element.name for element in ply.elements]:
        raise UnsupportedFormatError(f"{path}: no 'vertex' element")
    data = ply["vertex"].data
    names = data.dtype.names or ()
    for name in PLY_REQUIRED_FIELDS:
        if name not in names:
            raise UnsupportedFormatError(f"{path}: missing required property '{name}'")

    def column(name):
        return np.asarray(data[name], dtype=np.float64)

    count = len(data)
    rest_names = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n.split("_")[-1]))
    if len(rest_names) % 3:
        raise UnsupportedFormatError(f"{path}: f_rest property count {len(rest_names)} is not a multiple of 3")
    per_channel = len(rest_names) // 3
    sh = np.zeros((count, SH_COEFFS, 3))
    sh[:, 0, :] = np.stack([column(f"f_dc_{c}") for c in range(3)], axis=1)
    if per_channel:
        rest = np.stack([column(n) for n in rest_names], axis=1).reshape(count, 3, per_channel)
        if per_channel > SH_COEFFS - 1:
            warnings.warn(f"{path}: SH with {per_channel + 1} coefficients per channel truncated to degree 1",
                          stacklevel=2)
        kept = min(per_channel, SH_COEFFS - 1)
        sh[:, 1:1 + kept, :] = rest[:, :, :kept].transpose(0, 2, 1)

    return SplatSet(
        positions=np.stack([column(n) for n in ("x", "y", "z")], axis=1),
        log_scales=np.stack([column(f"scale_{i}") for i in range(3)], axis=1),
        rotations=np.stack([column(f"rot_{i}") for i in range(4)], axis=1),
        opacity_logits=column("opacity"),
        sh=sh,
    )
