import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from fewshot_splat.depth_prior import DepthPrior
from fewshot_splat.errors import InitializationError, InputError, UnsupportedFormatError
from fewshot_splat.splats import (INITIAL_OPACITY, SH_C0, SplatSet, eval_sh, export_ply, import_ply,
                                  init_from_depth, init_from_points, rgb_to_sh)

from conftest import make_camera, make_point


def test_single_point():
    splats = init_from_points([make_point(1, (1.0, 2.0, 3.0), [(1, (0, 0))], color=(255, 0, 0))])
    assert splats.count == 1
    assert np.allclose(splats.positions, [[1.0, 2.0, 3.0]])
    assert np.allclose(splats.rotations, [[1.0, 0.0, 0.0, 0.0]])
    assert np.allclose(splats.opacities, INITIAL_OPACITY)
    assert np.allclose(eval_sh(splats.sh, np.array([[0.0, 0.0, 1.0]])), [[1.0, 0.0, 0.0]])


def test_collinear_points_scale_from_neighbours():
    points = [make_point(i, (float(i), 0.0, 0.0), []) for i in range(3)]
    splats = init_from_points(points)
    assert np.allclose(splats.log_scales[1], 0.0)
    assert np.allclose(splats.scales[0], 1.5)


def test_point_without_color_is_mid_gray():
    splats = init_from_points([make_point(1, (0.0, 0.0, 1.0), [(1, (0.0, 0.0))])])
    assert np.allclose(splats.sh[0, 0], 0.0)


def test_point_color_sampled_from_track_images():
    image = np.zeros((4, 4, 3))
    image[1, 2] = [0.2, 0.4, 0.6]
    other = np.zeros((4, 4, 3))
    other[3, 0] = [0.4, 0.6, 0.8]
    point = make_point(1, (0.0, 0.0, 1.0), [(1, (2.2, 0.9)), (2, (0.1, 2.8))])
    splats = init_from_points([point], images={1: image, 2: other})
    assert np.allclose(splats.sh[0, 0], rgb_to_sh([0.3, 0.5, 0.7]))


def test_empty_point_list_is_refused():
    with pytest.raises(InitializationError):
        init_from_points([])


def test_unproject_constant_depth():
    camera = make_camera(width=8, height=6, focal=8.0)
    prior = DepthPrior(view_id=1, scale=1.0, offset=0.0, aligned=np.full((6, 8), 2.0))
    splats = init_from_depth([prior], [camera], stride=4)
    assert splats.count == 2 * 2
    assert np.allclose(splats.positions[:, 2], 2.0)


def test_principal_point_lies_on_the_optical_axis():
    camera = make_camera(width=15, height=15, cx=7.0, cy=7.0, center=(1.0, 0.0, 0.0))
    depth = np.zeros((15, 15))
    depth[7, 7] = 3.0
    prior = DepthPrior(view_id=1, scale=1.0, offset=0.0, aligned=depth)
    splats = init_from_depth([prior], [camera])
    assert np.allclose(splats.positions, [[1.0, 0.0, 3.0]])


def test_stride_doubling_quarters_the_count():
    camera = make_camera(width=32, height=32)
    prior = DepthPrior(view_id=1, scale=1.0, offset=0.0, aligned=np.ones((32, 32)))
    assert init_from_depth([prior], [camera], stride=1).count == 4 * init_from_depth([prior], [camera], 2).count


def test_unproject_uses_image_colors():
    camera = make_camera(width=2, height=1, focal=2.0)
    prior = DepthPrior(view_id=1, scale=1.0, offset=0.0, aligned=np.ones((1, 2)))
    image = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])
    splats = init_from_depth([prior], [camera], images={1: image})
    assert np.allclose(splats.sh[:, 0], rgb_to_sh(image[0]))


def _float32_splats(rng, count):
    arrays = {
        "positions": rng.normal(size=(count, 3)),
        "log_scales": rng.normal(size=(count, 3)),
        "rotations": rng.normal(size=(count, 4)),
        "opacity_logits": rng.normal(size=count),
        "sh": rng.normal(size=(count, 4, 3)),
    }
    return SplatSet(**{k: v.astype(np.float32).astype(np.float64) for k, v in arrays.items()})


def test_ply_round_trip(tmp_path, rng):
    splats = _float32_splats(rng, 17)
    export_ply(splats, tmp_path / "s.ply")
    assert import_ply(tmp_path / "s.ply").equals(splats)


def test_empty_ply(tmp_path):
    export_ply(SplatSet.empty(), tmp_path / "e.ply")
    assert PlyData.read(str(tmp_path / "e.ply"))["vertex"].count == 0
    assert import_ply(tmp_path / "e.ply").count == 0


def _write_ply(path, names, count=2):
    vertices = np.zeros(count, dtype=[(n, "f4") for n in names])
    for i, name in enumerate(names):
        vertices[name] = i
    PlyData([PlyElement.describe(vertices, "vertex")]).write(str(path))


def test_degree_three_sh_is_truncated(tmp_path):
    names = (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(45)]
             + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])
    _write_ply(tmp_path / "d3.ply", names)
    with pytest.warns(UserWarning, match="truncated"):
        splats = import_ply(tmp_path / "d3.ply")
    first_rest = names.index("f_rest_0")
    # channel-major: red coefficients are f_rest_0..14, green 15..29
    assert np.allclose(splats.sh[0, 1:, 0], first_rest + np.arange(3))
    assert np.allclose(splats.sh[0, 1:, 1], first_rest + 15 + np.arange(3))


def test_missing_property_is_named(tmp_path):
    _write_ply(tmp_path / "m.ply", ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"])
    with pytest.raises(UnsupportedFormatError, match="scale_0"):
        import_ply(tmp_path / "m.ply")


def test_zero_rest_coefficients_are_view_independent(rng):
    sh = np.zeros((3, 4, 3))
    sh[:, 0] = rgb_to_sh(rng.uniform(size=(3, 3)))
    directions = rng.normal(size=(3, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    assert np.allclose(eval_sh(sh, directions), eval_sh(sh, -directions))
    assert np.allclose(eval_sh(sh, directions), sh[:, 0] * SH_C0 + 0.5)


def test_mismatched_arrays_are_rejected():
    with pytest.raises(InputError):
        SplatSet(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 4, 3)))


def test_ply_uses_the_viewer_layout(tmp_path, rng):
    export_ply(_float32_splats(rng, 3), tmp_path / "v.ply")
    ply = PlyData.read(str(tmp_path / "v.ply"))
    assert ply.text is False and ply.byte_order == "<"
    vertex = ply["vertex"]
    expected = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
                + [f"f_rest_{i}" for i in range(9)]
                + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])
    assert [p.name for p in vertex.properties] == expected
    assert all(p.val_dtype == "f4" for p in vertex.properties)
