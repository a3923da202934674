import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fewshot_splat.config import DepthFitConfig
from fewshot_splat.depth_prior import (DepthPrior, RawDepthMap, align_depth, canny_edges, fit_objective,
                                       fit_scale_offset, read_pfm, read_prior, read_raw_depth, write_pfm,
                                       write_prior)
from fewshot_splat.errors import CorruptFileError, DegenerateFitError, InputError, UnsupportedFormatError
from fewshot_splat.scene_io import SparseDepthMap


def _sparse(pixels, depths, weights=None):
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64)
    weights = np.ones(len(depths)) if weights is None else np.asarray(weights, dtype=np.float64)
    return SparseDepthMap(view_id=1, pixels=pixels, depths=depths, weights=weights)


def _random_problem(rng, count=12, size=8):
    raw = RawDepthMap(view_id=1, values=rng.uniform(0.2, 3.0, size=(size, size)))
    pixels = np.column_stack([rng.integers(0, size, count), rng.integers(0, size, count)])
    depths = 2.0 * raw.values[pixels[:, 1], pixels[:, 0]] + 0.5 + rng.normal(0, 0.3, count)
    return raw, _sparse(pixels, depths, rng.uniform(0.1, 1.0, count))


def test_two_sample_fit_by_hand():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0]])
    scale, offset, residual = fit_scale_offset(raw, _sparse([[0, 0], [1, 0]], [3.0, 5.0]))
    assert (scale, offset) == (pytest.approx(2.0), pytest.approx(1.0))
    assert residual == pytest.approx(0.0, abs=1e-12)


def test_identity_fit():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0, 4.0]])
    scale, offset, residual = fit_scale_offset(raw, _sparse([[0, 0], [1, 0], [2, 0]], [1.0, 2.0, 4.0]))
    assert scale == pytest.approx(1.0)
    assert offset == pytest.approx(0.0, abs=1e-12)
    assert residual == pytest.approx(0.0, abs=1e-12)


def test_literal_weighting_scales_the_target():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0]])
    sparse = _sparse([[0, 0], [1, 0]], [3.0, 5.0], [1.0, 0.5])
    assert fit_scale_offset(raw, sparse, "literal")[:2] == (pytest.approx(-0.5), pytest.approx(3.5))
    assert fit_scale_offset(raw, sparse, "residual")[:2] == (pytest.approx(2.0), pytest.approx(1.0))


@pytest.mark.parametrize("weighting", ["literal", "residual"])
@pytest.mark.parametrize("seed", range(8))
def test_fit_matches_grid_search(seed, weighting):
    raw, sparse = _random_problem(np.random.default_rng(seed))
    scale, offset, _ = fit_scale_offset(raw, sparse, weighting)
    step = 0.005
    grid_s = scale + step * np.arange(-100, 101)
    grid_t = offset + step * np.arange(-100, 101)
    values = np.array([[fit_objective(raw, sparse, s, t, weighting) for t in grid_t] for s in grid_s])
    i, j = np.unravel_index(np.argmin(values), values.shape)
    assert abs(grid_s[i] - scale) <= step and abs(grid_t[j] - offset) <= step
    assert fit_objective(raw, sparse, scale, offset, weighting) <= values.min() + 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.1, 10.0), b=st.floats(-5.0, 5.0))
def test_aligned_prior_is_invariant_to_affine_raw(seed, a, b):
    raw, sparse = _random_problem(np.random.default_rng(seed))
    config = DepthFitConfig(weighting="residual")
    base = align_depth(raw, sparse, config)
    moved = align_depth(RawDepthMap(view_id=1, values=a * raw.values + b), sparse, config)
    assert np.allclose(moved.aligned, base.aligned, rtol=1e-5, atol=1e-5)
    assert moved.scale == pytest.approx(base.scale / a, rel=1e-6)


def test_degenerate_fits():
    raw = RawDepthMap(view_id=1, values=[[1.0, 1.0, 2.0]])
    with pytest.raises(DegenerateFitError):
        fit_scale_offset(raw, _sparse([[0, 0]], [3.0]))
    with pytest.raises(DegenerateFitError, match="identical"):
        fit_scale_offset(raw, _sparse([[0, 0], [1, 0]], [3.0, 4.0]))


def test_align_falls_back_to_offset_only():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0]])
    with pytest.warns(UserWarning, match="offset-only"):
        prior = align_depth(raw, _sparse([[0, 0]], [3.0]))
    assert (prior.scale, prior.offset) == (1.0, pytest.approx(2.0))
    assert np.allclose(prior.aligned, [[3.0, 4.0]])


def test_align_without_samples_is_rejected():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0]])
    with pytest.raises(DegenerateFitError):
        align_depth(raw, _sparse(np.zeros((0, 2)), []))


def test_align_without_adjustment_keeps_raw():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0]])
    prior = align_depth(raw, _sparse([[0, 0], [1, 0]], [3.0, 5.0]), DepthFitConfig(adjust=False))
    assert (prior.scale, prior.offset) == (1.0, 0.0)
    assert np.array_equal(prior.aligned, raw.values)


def test_samples_outside_raw_map_are_rejected():
    raw = RawDepthMap(view_id=1, values=[[1.0, 2.0]])
    with pytest.raises(InputError):
        fit_scale_offset(raw, _sparse([[0, 0], [5, 0]], [3.0, 4.0]))


def test_non_finite_raw_depth_is_rejected():
    with pytest.raises(InputError):
        RawDepthMap(view_id=1, values=[[1.0, np.nan]])


def test_canny_constant_image_has_no_edges():
    assert not canny_edges(np.full((12, 12, 3), 0.4)).mask.any()


def test_canny_vertical_step():
    image = np.zeros((20, 20, 3))
    image[:, 10:] = 1.0
    mask = canny_edges(image).mask
    assert mask[:, 9:11].any(axis=1).all()
    outside = np.ones(20, dtype=bool)
    outside[8:12] = False
    assert not mask[:, outside].any()


def test_canny_infinite_thresholds():
    image = np.zeros((20, 20, 3))
    image[:, 10:] = 1.0
    assert not canny_edges(image, low=np.inf, high=np.inf).mask.any()


def test_canny_rejects_inverted_thresholds():
    with pytest.raises(InputError):
        canny_edges(np.zeros((4, 4, 3)), low=0.5, high=0.1)


def test_pfm_round_trip(tmp_path, rng):
    values = rng.normal(size=(5, 7)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", values)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), values)


def test_big_endian_pfm(tmp_path):
    values = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=">f4")
    (tmp_path / "be.pfm").write_bytes(b"Pf\n2 2\n1.0\n" + np.flipud(values).tobytes())
    assert np.array_equal(read_pfm(tmp_path / "be.pfm"), values.astype(np.float32))


def test_color_pfm_is_unsupported(tmp_path):
    (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(UnsupportedFormatError):
        read_pfm(tmp_path / "c.pfm")


@pytest.mark.parametrize("content", [
    b"P5\n1 1\n-1.0\n" + bytes(4),
    b"Pf\n1 x\n-1.0\n" + bytes(4),
    b"Pf\n2 2\n-1.0\n" + bytes(4),
    b"Pf\n1 1",
])
def test_malformed_pfm(tmp_path, content):
    (tmp_path / "m.pfm").write_bytes(content)
    with pytest.raises(CorruptFileError):
        read_pfm(tmp_path / "m.pfm")


def test_png16_raw_depth(tmp_path):
    Image.fromarray(np.array([[1000, 2500]], dtype=np.uint16)).save(tmp_path / "d.png")
    raw = read_raw_depth(tmp_path / "d.png", 3, "png16", png_scale=0.001)
    assert raw.view_id == 3
    assert np.allclose(raw.values, [[1.0, 2.5]])


def test_missing_raw_depth(tmp_path):
    with pytest.raises(InputError, match="view 4"):
        read_raw_depth(tmp_path / "x.pfm", 4)


def test_prior_round_trip(tmp_path):
    raw = RawDepthMap(view_id=6, values=[[1.0, 2.0], [3.0, 4.5]], source="raw.pfm")
    prior = align_depth(raw, _sparse([[0, 0], [1, 0], [0, 1]], [2.5, 4.5, 6.5]))
    write_prior(prior, tmp_path / "view_06.pfm")
    loaded = read_prior(tmp_path / "view_06.pfm")
    assert loaded.view_id == 6
    assert loaded.scale == pytest.approx(prior.scale)
    assert loaded.offset == pytest.approx(prior.offset)
    assert loaded.source == "raw.pfm"
    assert loaded.aligned.dtype == prior.aligned.dtype == np.float32
    assert np.array_equal(loaded.aligned, prior.aligned)


def test_prior_without_sidecar(tmp_path):
    write_pfm(tmp_path / "plain.pfm", np.ones((2, 2)))
    prior = read_prior(tmp_path / "plain.pfm", view_id=9)
    assert (prior.view_id, prior.scale, prior.offset) == (9, 1.0, 0.0)


@pytest.mark.parametrize("weighting", ["literal", "residual"])
def test_noise_free_fit_recovers_the_affine_map(rng, weighting):
    raw = RawDepthMap(view_id=1, values=rng.uniform(0.5, 4.0, size=(10, 10)))
    pixels = np.column_stack([rng.integers(0, 10, 30), rng.integers(0, 10, 30)])
    depths = 1.7 * raw.values[pixels[:, 1], pixels[:, 0]] - 0.4
    scale, offset, _ = fit_scale_offset(raw, _sparse(pixels, depths, rng.uniform(0.2, 1.0, 30)), weighting)
    if weighting == "residual":
        assert abs(scale - 1.7) <= 1e-9 and abs(offset + 0.4) <= 1e-9
    else:
        # literal weighting fits w * D, so only unit weights recover the map exactly
        unit = fit_scale_offset(raw, _sparse(pixels, depths), weighting)
        assert abs(unit[0] - 1.7) <= 1e-9 and abs(unit[1] + 0.4) <= 1e-9


@pytest.mark.parametrize("weighting", ["literal", "residual"])
def test_fit_is_a_local_minimum(rng, weighting):
    raw, sparse = _random_problem(rng)
    scale, offset, _ = fit_scale_offset(raw, sparse, weighting)
    best = fit_objective(raw, sparse, scale, offset, weighting)
    for ds in (-1e-3, 0.0, 1e-3):
        for dt in (-1e-3, 0.0, 1e-3):
            assert fit_objective(raw, sparse, scale + ds, offset + dt, weighting) >= best - 1e-12


@pytest.mark.parametrize("weighting", ["literal", "residual"])
@pytest.mark.parametrize("factor", [0.25, 3.0])
def test_scaling_targets_scales_the_fit(weighting, factor):
    raw, sparse = _random_problem(np.random.default_rng(11))
    scale, offset, _ = fit_scale_offset(raw, sparse, weighting)
    scaled = SparseDepthMap(view_id=1, pixels=sparse.pixels, depths=factor * sparse.depths, weights=sparse.weights)
    moved_scale, moved_offset, _ = fit_scale_offset(raw, scaled, weighting)
    assert moved_scale == pytest.approx(factor * scale, rel=1e-9)
    assert moved_offset == pytest.approx(factor * offset, rel=1e-9, abs=1e-12)


def test_canny_ignores_a_brightness_offset():
    image = np.full((24, 24, 3), 0.1)
    image[:, 10] = 0.2
    image[:, 11:] = 0.5
    shifted = image + 0.3
    assert canny_edges(image).mask.any()
    assert np.array_equal(canny_edges(shifted).mask, canny_edges(image).mask)


def test_prior_is_float32_however_it_is_made():
    prior = DepthPrior(view_id=1, scale=1.0, offset=0.0, aligned=np.array([[0.1, 1.0 / 3.0]]))
    assert prior.aligned.dtype == np.float32
    raw = RawDepthMap(view_id=1, values=[[0.1, 0.7], [1.0 / 3.0, 2.0]])
    fitted = align_depth(raw, _sparse([[0, 0], [1, 0], [0, 1]], [1.3, 2.9, 1.9]))
    assert fitted.aligned.dtype == np.float32
