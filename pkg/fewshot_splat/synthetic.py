"""
Procedural forward-facing fixture scene.

Three textured fronto-parallel rectangles at depths 2, 4 and 8 seen by twelve
cameras looking down +z: eight on an elliptical ring (the hull, i.e. the
training pool) and four inside it (the held-out views). Images and depth are
ray-cast analytically. SfM points are sampled on the visible surfaces, and
the "estimated" raw depth is ground truth with multiplicative noise, pushed
through a known affine map so it has to be aligned before use.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fewshot_splat.config import SceneManifest, write_manifest
from fewshot_splat.depth_prior import write_pfm
from fewshot_splat.scene_io import Camera, SfmPoint, save_image, write_colmap_text


@dataclass(frozen=True)
class Plane:
    depth: float
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    color: tuple[float, float, float]
    period: float


PLANES = (
    Plane(2.0, (0.15, 0.95), (-0.25, 0.6), (0.9, 0.35, 0.2), 0.12),
    Plane(4.0, (-1.3, 0.7), (-1.0, 0.5), (0.25, 0.75, 0.35), 0.3),
    Plane(8.0, (-8.0, 8.0), (-6.0, 6.0), (0.3, 0.4, 0.9), 0.9),
)
RING_RADII = (0.45, 0.3)
INNER_SCALE = 0.4
RAW_SCALE = 2.5
RAW_OFFSET = 0.3


@dataclass(eq=False)
class SyntheticScene:
    cameras: list[Camera]
    points: list[SfmPoint]
    images: dict[int, np.ndarray] = field(default_factory=dict)
    depths: dict[int, np.ndarray] = field(default_factory=dict)
    raw_depths: dict[int, np.ndarray] = field(default_factory=dict)


def texture(plane: Plane, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Checkerboard modulated by a soft stripe, tinted by the plane color."""
    checker = (np.floor(x / plane.period) + np.floor(y / plane.period)) % 2
    stripe = 0.5 + 0.5 * np.sin(2.0 * np.pi * (x + 0.5 * y) / (2.7 * plane.period))
    shade = 0.45 + 0.35 * checker + 0.2 * stripe
    return np.clip(shade[..., None] * np.asarray(plane.color), 0.0, 1.0)


def ring_cameras(width: int = 128, height: int = 96, focal: float | None = None) -> list[Camera]:
    """Eight ring cameras followed by four interior ones, ids 1..12, identity rotation."""
    focal = focal if focal is not None else 0.8 * width
    intrinsics = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    angles = np.arange(8) * (2.0 * np.pi / 8)
    centers = [(RING_RADII[0] * np.cos(a), RING_RADII[1] * np.sin(a), 0.0) for a in angles]
    inner = angles[::2] + np.pi / 8
    centers += [(INNER_SCALE * RING_RADII[0] * np.cos(a), INNER_SCALE * RING_RADII[1] * np.sin(a), 0.0)
                for a in inner]
    return [
        Camera(id=i + 1, rotation=np.eye(3), translation=-np.asarray(c), intrinsics=intrinsics,
               width=width, height=height, name=f"view_{i + 1:02d}.png", camera_id=1)
        for i, c in enumerate(centers)
    ]


def raycast(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Color (H, W, 3) and camera-space depth (H, W) of the planes seen by `camera`."""
    ys, xs = np.meshgrid(np.arange(camera.height, dtype=np.float64), np.arange(camera.width, dtype=np.float64),
                         indexing="ij")
    rays = np.stack([(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)], axis=-1)
    rays_world = rays @ camera.rotation
    origin = camera.center
    color = np.zeros(xs.shape + (3,))
    depth = np.zeros(xs.shape)
    hit = np.zeros(xs.shape, dtype=bool)
    for plane in sorted(PLANES, key=lambda p: p.depth):
        t = (plane.depth - origin[2]) / rays_world[..., 2]
        px = origin[0] + t * rays_world[..., 0]
        py = origin[1] + t * rays_world[..., 1]
        inside = ((px >= plane.x_range[0]) & (px <= plane.x_range[1])
                  & (py >= plane.y_range[0]) & (py <= plane.y_range[1]) & (t > 0) & ~hit)
        color[inside] = texture(plane, px[inside], py[inside])
        depth[inside] = t[inside]
        hit |= inside
    return color, depth


def _sample_points(cameras: list[Camera], depths: dict[int, np.ndarray], rng: np.random.Generator,
                   per_plane: int) -> list[SfmPoint]:
    points = []
    for plane in PLANES:
        # keep the background samples inside the common field of view
        x_lo, x_hi = max(plane.x_range[0], -4.0), min(plane.x_range[1], 4.0)
        y_lo, y_hi = max(plane.y_range[0], -3.0), min(plane.y_range[1], 3.0)
        xy = rng.uniform((x_lo, y_lo), (x_hi, y_hi), size=(per_plane, 2))
        for x, y in xy:
            position = np.array([x, y, plane.depth])
            error = float(rng.uniform(0.2, 1.5))
            track = []
            for camera in cameras:
                cam = camera.world_to_camera(position)
                u = camera.fx * cam[0] / cam[2] + camera.cx
                v = camera.fy * cam[1] / cam[2] + camera.cy
                col, row = int(np.rint(u)), int(np.rint(v))
                if not (0 <= col < camera.width and 0 <= row < camera.height):
                    continue
                if abs(depths[camera.id][row, col] - cam[2]) > 1e-3 * cam[2]:
                    continue
                angle = rng.uniform(0.0, 2.0 * np.pi)
                # keep the noisy observation on the same pixel
                jitter = min(error, 0.45) * np.array([np.cos(angle), np.sin(angle)])
                track.append((camera.id, (float(u + jitter[0]), float(v + jitter[1]))))
            if len(track) >= 2:
                rgb = tuple(int(c) for c in np.rint(texture(plane, np.array([x]), np.array([y]))[0] * 255))
                points.append(SfmPoint(id=len(points) + 1, position=position, reprojection_error=error,
                                       track=track, color=rgb))
    return points


def make_scene(width: int = 128, height: int = 96, seed: int = 0, noise: float = 0.05,
               points_per_plane: int = 150) -> SyntheticScene:
    """
    Build the fixture scene in memory.

    Args:
        width, height: Image size
        seed: Seed for point sampling and depth noise
        noise: Standard deviation of the multiplicative raw-depth noise
        points_per_plane: SfM samples drawn per plane before visibility filtering
    """
    rng = np.random.default_rng(seed)
    cameras = ring_cameras(width, height)
    scene = SyntheticScene(cameras=cameras, points=[])
    for camera in cameras:
        color, depth = raycast(camera)
        scene.images[camera.id] = color
        scene.depths[camera.id] = depth
        noisy = depth * (1.0 + noise * rng.standard_normal(depth.shape))
        scene.raw_depths[camera.id] = (noisy - RAW_OFFSET) / RAW_SCALE
    scene.points = _sample_points(cameras, scene.depths, rng, points_per_plane)
    return scene


def write_scene(scene: SyntheticScene, directory: Path | str, name: str = "synthetic") -> Path:
    """
    Write images/, sparse/0 (COLMAP text), depth_raw/ and depth_gt/ PFMs and
    a scene manifest.

    Returns:
        Path: The manifest file
    """
    directory = Path(directory)
    for sub in ("images", "depth_raw", "depth_gt"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for camera in scene.cameras:
        save_image(directory / "images" / camera.name, scene.images[camera.id])
        write_pfm(directory / "depth_raw" / f"{camera.stem}.pfm", scene.raw_depths[camera.id])
        write_pfm(directory / "depth_gt" / f"{camera.stem}.pfm", scene.depths[camera.id])
    write_colmap_text(directory / "sparse" / "0", scene.cameras, scene.points)
    manifest = SceneManifest(scene=name, images=Path("images"), colmap=Path("sparse/0"), depths=Path("depth_raw"))
    path = directory / "scene.txt"
    write_manifest(manifest, path)
    return path
