import numpy as np
import pytest

from fewshot_splat.scene_io import Camera, SfmPoint
from fewshot_splat.splats import SplatSet, rgb_to_sh, logit, SH_COEFFS
from fewshot_splat.synthetic import make_scene, write_scene


def make_camera(camera_id=1, width=16, height=16, focal=16.0, center=(0.0, 0.0, 0.0), cx=None, cy=None,
                name=None):
    """Camera looking down +z from `center` with identity rotation."""
    cx = (width - 1) / 2.0 if cx is None else cx
    cy = (height - 1) / 2.0 if cy is None else cy
    intrinsics = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    return Camera(id=camera_id, rotation=np.eye(3), translation=-np.asarray(center, dtype=np.float64),
                  intrinsics=intrinsics, width=width, height=height,
                  name=name or f"view_{camera_id:02d}.png")


def make_splats(positions, colors=None, opacities=None, log_scales=None, rotations=None, sh_rest=None):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    count = len(positions)
    colors = np.full((count, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    opacities = np.full(count, 0.5) if opacities is None else np.asarray(opacities, dtype=np.float64)
    if log_scales is None:
        log_scales = np.full((count, 3), np.log(1e-4))
    if rotations is None:
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    sh = np.zeros((count, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh(colors)
    if sh_rest is not None:
        sh[:, 1:, :] = sh_rest
    return SplatSet(positions=positions, log_scales=log_scales, rotations=rotations,
                    opacity_logits=logit(opacities), sh=sh)


def random_splats(rng, count, depth=(3.0, 5.0), spread=0.6, scale=(0.15, 0.4), opacity=(0.1, 0.35)):
    """Small random scene in front of a camera at the origin, safely inside a 16x16 view."""
    positions = np.column_stack([
        rng.uniform(-spread, spread, count) * 0.5,
        rng.uniform(-spread, spread, count) * 0.5,
        rng.uniform(*depth, count),
    ])
    rotations = rng.normal(size=(count, 4))
    sh_rest = rng.uniform(-0.1, 0.1, size=(count, SH_COEFFS - 1, 3))
    return make_splats(
        positions,
        colors=rng.uniform(0.35, 0.65, size=(count, 3)),
        opacities=rng.uniform(*opacity, count),
        log_scales=np.log(rng.uniform(*scale, size=(count, 3))),
        rotations=rotations / np.linalg.norm(rotations, axis=1, keepdims=True),
        sh_rest=sh_rest,
    )


def make_point(point_id, position, track, error=1.0, color=None):
    return SfmPoint(id=point_id, position=np.asarray(position, dtype=np.float64), reprojection_error=error,
                    track=list(track), color=color)


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene():
    return make_scene(width=32, height=24, seed=3, points_per_plane=60)


@pytest.fixture
def tiny_scene_dir(tmp_path, tiny_scene):
    manifest = write_scene(tiny_scene, tmp_path / "scene", name="tiny")
    return manifest
