"""
Experiment protocol: hull-based train/test split of a forward-facing rig,
seeded k-shot sampling, PSNR/SSIM evaluation and aggregation over seeds.
"""
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull, QhullError

from fewshot_splat.errors import InputError, SplitError
from fewshot_splat.losses import ssim
from fewshot_splat.rasterizer import render
from fewshot_splat.scene_io import Camera
from fewshot_splat.splats import SplatSet

RESULT_COLUMNS = ["scene", "k", "seed", "view", "psnr", "ssim"]
MIN_SPLIT_CAMERAS = 4
PLANARITY_TOLERANCE = 1e-9
MASK64 = (1 << 64) - 1


@dataclass
class SplitSpec:
    scene: str
    train_pool: tuple[int, ...]
    test: tuple[int, ...]
    selections: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def select(self, k: int, seed: int) -> tuple[int, ...]:
        selection = sample_kshot(self.train_pool, k, seed)
        self.selections[seed] = selection
        return selection


@dataclass(eq=False)
class MetricReport:
    """
    per_view: one row per (scene, k, seed, view)
    per_seed: view means per run, with a `complete` flag
    summary: mean and standard deviation over complete seeds per (scene, k)
    """
    per_view: pd.DataFrame
    per_seed: pd.DataFrame
    summary: pd.DataFrame


def convex_hull_split(cameras: list[Camera], scene: str = "") -> SplitSpec:
    """
    Split cameras into a hull train pool and an interior test set.

    Camera centres are projected onto their best-fit plane (first two principal
    components) and the 2D convex hull is taken there. Hull vertices train;
    everything else tests. Cameras lying on a hull edge without being a
    vertex count as interior.

    Raises:
        SplitError: Fewer than 4 cameras, or centres that do not span a plane
    """
    if len(cameras) < MIN_SPLIT_CAMERAS:
        raise SplitError(f"hull split needs at least {MIN_SPLIT_CAMERAS} cameras, got {len(cameras)}")
    centers = np.stack([camera.center for camera in cameras])
    centered = centers - centers.mean(axis=0)
    _, singular, axes = np.linalg.svd(centered, full_matrices=False)
    if singular[0] <= PLANARITY_TOLERANCE or singular[1] <= PLANARITY_TOLERANCE * singular[0]:
        raise SplitError("camera centres are collinear or coincident, the hull is degenerate")
    planar = centered @ axes[:2].T
    try:
        hull = ConvexHull(planar)
    except QhullError as exc:
        raise SplitError(f"convex hull failed: {exc}") from exc

    ids = np.array([camera.id for camera in cameras])
    on_hull = np.zeros(len(cameras), dtype=bool)
    on_hull[hull.vertices] = True
    split = SplitSpec(scene=scene, train_pool=tuple(sorted(ids[on_hull].tolist())),
                      test=tuple(sorted(ids[~on_hull].tolist())))
    if not split.test:
        warnings.warn(f"every camera of scene '{scene}' lies on the hull, the test set is empty")
    return split


class SplitMix64:
    """
    splitmix64 generator:
        state += 0x9E3779B97F4A7C15
        z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)
    all arithmetic modulo 2**64. `below(n)` draws uniformly from [0, n) by
    rejecting outputs at or above the largest multiple of n.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        limit = ((1 << 64) // n) * n
        while True:
            value = self.next()
            if value < limit:
                return value % n


def sample_kshot(pool, k: int, seed: int) -> tuple[int, ...]:
    """
    Uniform k-subset of `pool` without replacement.

    The pool is sorted, then a partial Fisher-Yates shuffle swaps position i
    with i + below(len - i) for i = 0..k-1 using SplitMix64(seed). The first
    k items, sorted, are the selection.
    """
    items = sorted(int(v) for v in pool)
    if not 1 <= k <= len(items):
        raise InputError(f"k must lie in [1, {len(items)}] for this pool, got {k}")
    rng = SplitMix64(seed)
    for i in range(k):
        j = i + rng.below(len(items) - i)
        items[i], items[j] = items[j], items[i]
    return tuple(sorted(items[:k]))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for range-1 images; identical images give +inf."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def evaluate(splats: SplatSet, views, background=(0.0, 0.0, 0.0), tile_size: int = 16,
             threads: int | None = None) -> pd.DataFrame:
    """
    Render every held-out view and score it against its image.

    Args:
        views: Iterable of (Camera, image) pairs or objects with camera/image attributes

    Returns:
        DataFrame: columns view, name, psnr, ssim
    """
    rows = []
    for view in views:
        camera, image = (view.camera, view.image) if hasattr(view, "camera") else view
        rendered = np.clip(render(splats, camera, background, tile_size, threads).color, 0.0, 1.0)
        rows.append({"view": camera.id, "name": camera.name, "psnr": psnr(rendered, image),
                     "ssim": ssim(rendered, image)})
    return pd.DataFrame(rows, columns=["view", "name", "psnr", "ssim"])


def aggregate(results: pd.DataFrame, expected_seeds=None) -> MetricReport:
    """
    Per-seed view means and per-(scene, k) means over seeds.

    A seed run is incomplete when any of its metrics is missing, or when it
    appears in `expected_seeds` but has no rows. Incomplete runs are kept in
    the per-seed table with complete=False, excluded from the summary and
    reported with a warning.
    """
    missing_columns = set(RESULT_COLUMNS) - set(results.columns)
    if missing_columns:
        raise InputError(f"results are missing column(s) {sorted(missing_columns)}")
    per_view = results[RESULT_COLUMNS].copy()

    gaps = per_view.assign(gap=per_view[["psnr", "ssim"]].isna().any(axis=1))
    per_seed = gaps.groupby(["scene", "k", "seed"], sort=True).agg(
        psnr=("psnr", "mean"), ssim=("ssim", "mean"), views=("view", "count"), gap=("gap", "any"),
    ).reset_index()
    per_seed["complete"] = ~per_seed.pop("gap").astype(bool)

    if expected_seeds is not None:
        absent = []
        for (scene, k), block in per_seed.groupby(["scene", "k"]):
            for seed in sorted(set(expected_seeds) - set(block["seed"])):
                absent.append({"scene": scene, "k": k, "seed": seed, "psnr": np.nan, "ssim": np.nan,
                               "views": 0, "complete": False})
        if absent:
            per_seed = pd.concat([per_seed, pd.DataFrame(absent)], ignore_index=True)
            per_seed = per_seed.sort_values(["scene", "k", "seed"], ignore_index=True)

    incomplete = per_seed[~per_seed["complete"].astype(bool)]
    for row in incomplete.itertuples():
        warnings.warn(f"run scene={row.scene} k={row.k} seed={row.seed} is incomplete and excluded from the mean")

    complete = per_seed[per_seed["complete"].astype(bool)]
    summary = complete.groupby(["scene", "k"], sort=True).agg(
        psnr_mean=("psnr", "mean"),
        psnr_std=("psnr", lambda s: float(np.std(s, ddof=0))),
        ssim_mean=("ssim", "mean"),
        ssim_std=("ssim", lambda s: float(np.std(s, ddof=0))),
        seeds=("seed", "count"),
    ).reset_index()
    flagged = incomplete.groupby(["scene", "k"]).size().rename("incomplete").reset_index()
    summary = summary.merge(flagged, on=["scene", "k"], how="left")
    summary["incomplete"] = summary["incomplete"].fillna(0).astype(int)
    return MetricReport(per_view=per_view, per_seed=per_seed, summary=summary)


def format_table(report: MetricReport) -> str:
    """Aligned text table of the summary (PSNR in dB, 2 decimals; SSIM 3 decimals)."""
    if report.summary.empty:
        return "(no complete runs)"
    formatters = {
        "psnr_mean": "{:.2f}".format, "psnr_std": "{:.2f}".format,
        "ssim_mean": "{:.3f}".format, "ssim_std": "{:.3f}".format,
    }
    return report.summary.to_string(index=False, formatters=formatters)


def write_results(report: MetricReport, output_dir: Path | str) -> dict[str, Path]:
    """Write results.csv (per view), per_seed.csv, summary.csv and table.txt."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": output_dir / "results.csv",
        "per_seed": output_dir / "per_seed.csv",
        "summary": output_dir / "summary.csv",
        "table": output_dir / "table.txt",
    }
    report.per_view.to_csv(paths["results"], index=False)
    report.per_seed.to_csv(paths["per_seed"], index=False)
    report.summary.to_csv(paths["summary"], index=False)
    paths["table"].write_text(format_table(report) + "\n", encoding="utf-8")
    return paths
