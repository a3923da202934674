import itertools
import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_splat.errors import InputError, SplitError
from fewshot_splat.eval_harness import (RESULT_COLUMNS, SplitMix64, aggregate, convex_hull_split, evaluate,
                                        format_table, psnr, sample_kshot, write_results)
from fewshot_splat.splats import SplatSet
from fewshot_splat.synthetic import ring_cameras

from conftest import make_camera


def _cameras(centers):
    return [make_camera(i + 1, center=c) for i, c in enumerate(centers)]


def test_square_with_centre():
    split = convex_hull_split(_cameras([(-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0), (0, 0, 0)]))
    assert split.train_pool == (1, 2, 3, 4)
    assert split.test == (5,)


def test_hull_split_is_scale_and_plane_invariant():
    # same layout tilted into another plane
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, -0.8], [0.0, 0.8, 0.6]])
    centers = [tilt @ (3.0 * np.array(c)) for c in [(-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0), (0.2, 0.1, 0)]]
    split = convex_hull_split(_cameras(centers))
    assert split.test == (5,)


def test_synthetic_rig_splits_into_ring_and_interior():
    split = convex_hull_split(ring_cameras(32, 24))
    assert split.train_pool == tuple(range(1, 9))
    assert split.test == (9, 10, 11, 12)


def test_collinear_cameras_raise_split_error():
    with pytest.raises(SplitError):
        convex_hull_split(_cameras([(float(i), 0.0, 0.0) for i in range(6)]))


def test_coincident_cameras_raise_split_error():
    with pytest.raises(SplitError):
        convex_hull_split(_cameras([(0.0, 0.0, 0.0)] * 5))


def test_too_few_cameras_raise_split_error():
    with pytest.raises(SplitError):
        convex_hull_split(_cameras([(0, 0, 0), (1, 0, 0), (0, 1, 0)]))


def test_all_on_hull_warns_with_empty_test_set():
    with pytest.warns(UserWarning, match="test set is empty"):
        split = convex_hull_split(_cameras([(-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0)]))
    assert split.test == ()


def _inside_triangle(p, a, b, c):
    def cross(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0])
    signs = [cross(a, b, p), cross(b, c, p), cross(c, a, p)]
    return all(s >= 0 for s in signs) or all(s <= 0 for s in signs)


def _brute_force_vertices(points):
    vertices = set()
    for i, p in enumerate(points):
        others = [q for j, q in enumerate(points) if j != i]
        if not any(_inside_triangle(p, *tri) for tri in itertools.combinations(others, 3)):
            vertices.add(i + 1)
    return vertices


@pytest.mark.parametrize("seed", range(50))
def test_hull_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1, 1, size=(int(rng.integers(5, 10)), 2))
    split = convex_hull_split(_cameras([(x, y, 0.0) for x, y in xy]))
    assert set(split.train_pool) == _brute_force_vertices(xy)
    assert set(split.train_pool) | set(split.test) == set(range(1, len(xy) + 1))


def test_splitmix64_reference_outputs():
    rng = SplitMix64(0)
    assert [rng.next() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def _reference_kshot(pool, k, seed):
    mask = (1 << 64) - 1
    state = seed & mask

    def draw():
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        return z ^ (z >> 31)

    items = sorted(pool)
    for i in range(k):
        n = len(items) - i
        limit = (2 ** 64 // n) * n
        value = draw()
        while value >= limit:
            value = draw()
        j = i + value % n
        items[i], items[j] = items[j], items[i]
    return tuple(sorted(items[:k]))


@pytest.mark.parametrize("seed", [0, 1, 7, 2 ** 40 + 3])
def test_sample_kshot_matches_reference(seed):
    pool = [3, 11, 5, 8, 1, 20, 14]
    assert sample_kshot(pool, 4, seed) == _reference_kshot(pool, 4, seed)


def test_sample_kshot_properties():
    pool = [9, 2, 7, 4, 5, 1]
    for seed in range(20):
        selection = sample_kshot(pool, 3, seed)
        assert len(selection) == 3
        assert list(selection) == sorted(set(selection))
        assert set(selection) <= set(pool)
        assert selection == sample_kshot(sorted(pool), 3, seed)
    assert sample_kshot(pool, len(pool), 5) == tuple(sorted(pool))


def test_sample_kshot_is_roughly_uniform():
    counts = {v: 0 for v in range(4)}
    for seed in range(4000):
        counts[sample_kshot(range(4), 1, seed)[0]] += 1
    assert all(850 < c < 1150 for c in counts.values())


@pytest.mark.parametrize("k", [0, 7])
def test_sample_kshot_rejects_bad_k(k):
    with pytest.raises(InputError):
        sample_kshot(range(6), k, 0)


def test_split_spec_records_selection():
    split = convex_hull_split(ring_cameras(32, 24))
    selection = split.select(3, seed=2)
    assert split.selections[2] == selection
    assert set(selection) <= set(split.train_pool)


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_evaluate_background_only_scene():
    camera = make_camera(3)
    image = np.full((16, 16, 3), 0.25)
    frame = evaluate(SplatSet.empty(), [(camera, image)], background=(0.25, 0.25, 0.25))
    assert frame["view"].tolist() == [3]
    assert frame.loc[0, "psnr"] == math.inf
    assert frame.loc[0, "ssim"] == pytest.approx(1.0)


def _results():
    rows = [
        ("s", 3, 0, 9, 20.0, 0.8), ("s", 3, 0, 10, 22.0, 0.9),
        ("s", 3, 1, 9, 24.0, 0.9), ("s", 3, 1, 10, 26.0, 1.0),
        ("s", 3, 2, 9, np.nan, np.nan), ("s", 3, 2, 10, 30.0, 0.95),
    ]
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def test_aggregate_excludes_incomplete_runs():
    with pytest.warns(UserWarning, match="seed=2"):
        report = aggregate(_results())
    row = report.summary.iloc[0]
    assert row["psnr_mean"] == pytest.approx(23.0)
    assert row["psnr_std"] == pytest.approx(2.0)
    assert row["ssim_mean"] == pytest.approx(0.9)
    assert row["ssim_std"] == pytest.approx(0.05)
    assert row["seeds"] == 2
    assert row["incomplete"] == 1
    assert report.per_seed["complete"].tolist() == [True, True, False]


def test_aggregate_flags_missing_seeds():
    with pytest.warns(UserWarning, match="seed=3"):
        report = aggregate(_results(), expected_seeds=[0, 1, 2, 3])
    assert report.per_seed["seed"].tolist() == [0, 1, 2, 3]
    assert report.summary.iloc[0]["incomplete"] == 2


def test_aggregate_rejects_missing_columns():
    with pytest.raises(InputError):
        aggregate(pd.DataFrame({"scene": ["s"], "psnr": [1.0]}))


def test_write_results(tmp_path):
    with pytest.warns(UserWarning):
        report = aggregate(_results())
    paths = write_results(report, tmp_path / "out")
    assert pd.read_csv(paths["results"]).shape == (6, 6)
    assert "23.00" in paths["table"].read_text()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), count=st.integers(4, 25))
def test_split_partitions_the_cameras(seed, count):
    rng = np.random.default_rng(seed)
    centers = np.column_stack([rng.uniform(-1, 1, count), rng.uniform(-1, 1, count), np.zeros(count)])
    cameras = _cameras(centers)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        split = convex_hull_split(cameras)
    train, test = set(split.train_pool), set(split.test)
    assert not train & test
    assert train | test == {c.id for c in cameras}
    assert len(split.train_pool) + len(split.test) == count


def test_psnr_is_symmetric(rng):
    a, b = rng.uniform(size=(12, 9, 3)), rng.uniform(size=(12, 9, 3))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_falls_as_noise_grows(rng):
    image = rng.uniform(size=(16, 16, 3))
    noise = rng.uniform(-1.0, 1.0, size=image.shape)
    scores = [psnr(image, image + amplitude * noise) for amplitude in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(later < earlier for earlier, later in zip(scores, scores[1:]))
