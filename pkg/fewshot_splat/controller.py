"""
Controller: orchestrates the few-shot workflow stage by stage.

scene -> split/sample -> filter -> fit depth -> initialize -> train -> evaluate

Each run_* entry point prints its stages, catches pipeline errors and returns
a status dict; the CLI turns that dict into a process exit code.
"""
import json
import warnings
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import pandas as pd

from fewshot_splat import __version__
from fewshot_splat.config import (TrainConfig, DepthFitConfig, SceneManifest, read_manifest,
                                  write_config)
from fewshot_splat.console import CONSOLE, banner
from fewshot_splat.depth_prior import (DepthPrior, align_depth, canny_edges, read_raw_depth, raw_depth_path,
                                       read_prior, write_prior, write_pfm)
from fewshot_splat.errors import FewShotSplatError, InputError
from fewshot_splat.eval_harness import (SplitSpec, convex_hull_split, evaluate, aggregate, write_results,
                                        format_table, RESULT_COLUMNS)
from fewshot_splat.losses import write_loss_curve
from fewshot_splat.rasterizer import render
from fewshot_splat.scene_io import Camera, SfmPoint, parse_colmap, filter_points, project_sparse_depth, \
    load_image, save_image
from fewshot_splat.splats import SplatSet, init_from_points, init_from_depth, export_ply, import_ply
from fewshot_splat.synthetic import make_scene, write_scene
from fewshot_splat.trainer import TrainingView, train

INIT_SOURCES = ("sparse", "unproject", "all-points")


@dataclass
class RunManifest:
    """Everything needed to reproduce one training run. Written before training starts."""
    scene: str
    manifest_path: str
    output_dir: str
    k: int
    seed: int
    selection: list[int]
    test_views: list[int]
    init_source: str
    prior_dir: str | None
    train_config: dict
    fit_config: dict
    tool_version: str = __version__
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _failed(stage: str, error: FewShotSplatError) -> dict:
    CONSOLE.print(f"\n❌ {stage} failed: {error}")
    return {"status": "error", "stage": stage, "error": str(error), "exit_code": error.exit_code}


def stage_scene(manifest_path: Path | str) -> dict:
    """
    EXTRACT STEP: read the scene manifest and its COLMAP model.

    Returns:
        dict: manifest, cameras, points
    """
    manifest = read_manifest(manifest_path)
    cameras, points = parse_colmap(manifest.colmap)
    CONSOLE.print(f"📥 Scene '{manifest.scene}': {len(cameras)} cameras, {len(points)} SfM points")
    return {"manifest": manifest, "cameras": cameras, "points": points}


def load_images(manifest: SceneManifest, cameras: list[Camera]) -> dict[int, np.ndarray]:
    """Training images by camera id, looked up by the COLMAP image name."""
    images = {}
    for camera in cameras:
        image = load_image(manifest.images / camera.name)
        if image.shape[:2] != (camera.height, camera.width):
            raise InputError(f"image {camera.name} is {image.shape[1]}x{image.shape[0]}, "
                             f"camera {camera.id} expects {camera.width}x{camera.height}")
        images[camera.id] = image
    return images


def stage_split(manifest: SceneManifest, cameras: list[Camera], k: int, seed: int) -> tuple[SplitSpec, list[Camera]]:
    """Hull split of the rig, then the seeded k-shot selection from the train pool."""
    split = convex_hull_split(cameras, scene=manifest.scene)
    selection = split.select(k, seed)
    by_id = {camera.id: camera for camera in cameras}
    CONSOLE.print(f"🔀 Split: {len(split.train_pool)} train-pool cameras, {len(split.test)} test cameras; "
                  f"k={k}, seed={seed} -> views {list(selection)}")
    return split, [by_id[i] for i in selection]


def stage_filter(points: list[SfmPoint], selected: list[Camera], min_views: int) -> list[SfmPoint]:
    """Keep points seen by enough selected views. The threshold is capped at k."""
    effective = min(min_views, len(selected))
    if effective < min_views:
        CONSOLE.print(f"⚠️ min_views {min_views} exceeds k={len(selected)}; using {effective}")
    kept = filter_points(points, {camera.id for camera in selected}, effective)
    CONSOLE.print(f"🔍 Point filter (>= {effective} views): {len(kept)} of {len(points)} points kept")
    return kept


def stage_fit_depth(manifest: SceneManifest, selected: list[Camera], points: list[SfmPoint],
                    fit_config: DepthFitConfig, output_dir: Path | None = None) -> dict:
    """
    TRANSFORM STEP: align raw depth of every selected view to its sparse depth.

    Returns:
        dict: priors and sparse maps by view id, plus a per-view report DataFrame
    """
    if manifest.depths is None:
        raise InputError(f"scene '{manifest.scene}' has no raw depth directory in its manifest")
    fit_format = fit_config.raw_format or manifest.depth_format
    png_scale = fit_config.png_depth_scale if fit_config.png_depth_scale is not None else manifest.depth_scale
    priors, sparse_maps, rows = {}, {}, []
    for camera in selected:
        sparse = project_sparse_depth(points, camera)
        path = raw_depth_path(manifest.depths, camera.stem, fit_format)
        if not path.exists():
            raise InputError(f"missing raw depth for view {camera.id} ({camera.name}): {path}")
        raw = read_raw_depth(path, camera.id, fit_format, png_scale)
        if raw.values.shape != (camera.height, camera.width):
            raise InputError(f"raw depth {path} is {raw.values.shape[1]}x{raw.values.shape[0]}, "
                             f"view {camera.id} is {camera.width}x{camera.height}")
        prior = align_depth(raw, sparse, fit_config)
        priors[camera.id] = prior
        sparse_maps[camera.id] = sparse
        rows.append({"view": camera.id, "name": camera.name, "samples": len(sparse),
                     "scale": prior.scale, "offset": prior.offset, "residual": prior.residual})
        CONSOLE.print(f"   • view {camera.id} ({camera.name}): s*={prior.scale:.6g} t*={prior.offset:.6g} "
                      f"residual={prior.residual:.6g} from {len(sparse)} samples")
        if output_dir is not None:
            write_prior(prior, output_dir / f"{camera.stem}.pfm")
    report = pd.DataFrame(rows, columns=["view", "name", "samples", "scale", "offset", "residual"])
    if output_dir is not None:
        report.to_csv(output_dir / "fit_report.csv", index=False, float_format="%.10g")
    return {"priors": priors, "sparse": sparse_maps, "report": report}


def stage_load_priors(prior_dir: Path | str, selected: list[Camera]) -> dict[int, DepthPrior]:
    """Read ready-made priors (e.g. rendered depth of an all-view model) by image stem."""
    prior_dir = Path(prior_dir)
    priors = {}
    for camera in selected:
        path = prior_dir / f"{camera.stem}.pfm"
        if not path.exists():
            raise InputError(f"missing prior for view {camera.id} ({camera.name}): {path}")
        priors[camera.id] = read_prior(path, view_id=camera.id)
    CONSOLE.print(f"📂 Loaded {len(priors)} priors from {prior_dir}")
    return priors


def stage_initialize(source: str, points: list[SfmPoint], all_points: list[SfmPoint],
                     priors: dict[int, DepthPrior], selected: list[Camera],
                     images: dict[int, np.ndarray], stride: int = 4) -> SplatSet:
    if source == "sparse":
        splats = init_from_points(points, images)
    elif source == "all-points":
        splats = init_from_points(all_points, images)
    elif source == "unproject":
        splats = init_from_depth([priors[c.id] for c in selected], selected, stride, images)
    else:
        raise InputError(f"unknown init source '{source}', expected one of {INIT_SOURCES}")
    CONSOLE.print(f"✨ Initialized {splats.count} splats from '{source}'")
    return splats


def run_fit_depth(manifest_path: Path | str, output_dir: Path | str, fit_config: DepthFitConfig,
                  k: int | None = None, seed: int = 0) -> dict:
    """
    Fit priors for the k-shot selection (or every view when k is None) and
    write PFM + sidecar per view and fit_report.csv.
    """
    banner("📐 FIT DEPTH: aligning raw depth to sparse SfM depth")
    try:
        fit_config.validate()
        scene = stage_scene(manifest_path)
        cameras, points = scene["cameras"], scene["points"]
        if k is not None:
            _, selected = stage_split(scene["manifest"], cameras, k, seed)
            points = stage_filter(points, selected, fit_config.min_views)
        else:
            selected = cameras
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        fitted = stage_fit_depth(scene["manifest"], selected, points, fit_config, output_dir)
    except FewShotSplatError as e:
        return _failed("fit-depth", e)
    CONSOLE.print(f"\n✅ Fit complete: {len(fitted['priors'])} priors written to {output_dir}")
    return {"status": "ok", "exit_code": 0, "priors": fitted["priors"], "report": fitted["report"]}


def run_train(manifest_path: Path | str, output_dir: Path | str, k: int, seed: int, config: TrainConfig,
              fit_config: DepthFitConfig, init_source: str = "sparse", prior_dir: Path | str | None = None,
              show_progress: bool = True) -> dict:
    """
    Full run: split -> sample -> filter -> fit -> init -> train -> evaluate.

    Artifacts in output_dir: run_manifest.json (written before training),
    config.txt, priors/, fit_report.csv, loss_curve.csv, densify.csv,
    splats.ply, metrics.csv (columns scene, k, seed, view, psnr, ssim).
    """
    banner(f"🚀 TRAIN: k={k}, seed={seed}")
    output_dir = Path(output_dir)
    try:
        config.validate()
        fit_config.validate()
        if init_source not in INIT_SOURCES:
            raise InputError(f"unknown init source '{init_source}', expected one of {INIT_SOURCES}")
        scene = stage_scene(manifest_path)
        manifest, cameras, all_points = scene["manifest"], scene["cameras"], scene["points"]
        split, selected = stage_split(manifest, cameras, k, seed)
        points = stage_filter(all_points, selected, fit_config.min_views)
        images = load_images(manifest, selected)

        output_dir.mkdir(parents=True, exist_ok=True)
        needs_priors = (config.depth_loss and config.depth_target == "dense") or init_source == "unproject"
        sparse = {camera.id: project_sparse_depth(points, camera) for camera in selected}
        priors = {}
        if prior_dir is not None:
            priors = stage_load_priors(prior_dir, selected)
        elif needs_priors:
            (output_dir / "priors").mkdir(exist_ok=True)
            priors = stage_fit_depth(manifest, selected, points, fit_config, output_dir / "priors")["priors"]
        masks = {}
        if config.smooth_loss:
            masks = {cid: canny_edges(image, fit_config.canny_low, fit_config.canny_high, fit_config.canny_sigma,
                                      view_id=cid) for cid, image in images.items()}

        init = stage_initialize(init_source, points, all_points, priors, selected, images)

        run_manifest = RunManifest(
            scene=manifest.scene, manifest_path=str(manifest.path), output_dir=str(output_dir), k=k, seed=seed,
            selection=[c.id for c in selected], test_views=list(split.test), init_source=init_source,
            prior_dir=str(prior_dir) if prior_dir is not None else None,
            train_config=asdict(config), fit_config=asdict(fit_config),
        )
        run_manifest.write(output_dir / "run_manifest.json")
        write_config(config, output_dir / "config.txt")

        CONSOLE.print(f"\n🔄 Training {init.count} splats on {len(selected)} views for up to "
                      f"{config.max_iterations} iterations")
        views = [TrainingView(camera=c, image=images[c.id]) for c in selected]
        checkpoints = output_dir / "checkpoints" if config.checkpoint_every else None
        splats, log = train(views, priors, masks, init, config, sparse=sparse, checkpoint_dir=checkpoints,
                            show_progress=show_progress)
        export_ply(splats, output_dir / "splats.ply")
        write_loss_curve(log.rows, output_dir / "loss_curve.csv")
        pd.DataFrame(log.densify_events, columns=["iteration", "clones", "splits", "pruned", "splats"]).to_csv(
            output_dir / "densify.csv", index=False)

        by_id = {camera.id: camera for camera in cameras}
        test_cameras = [by_id[i] for i in split.test]
        test_images = load_images(manifest, test_cameras)
        scores = evaluate(splats, [(c, test_images[c.id]) for c in test_cameras], config.background,
                          config.tile_size, config.threads)
        metrics = scores.assign(scene=manifest.scene, k=k, seed=seed)[RESULT_COLUMNS]
        metrics.to_csv(output_dir / "metrics.csv", index=False, float_format="%.10g")
    except FewShotSplatError as e:
        return _failed("train", e)

    CONSOLE.print(f"\n✅ Training finished after {log.iterations} iterations "
                  f"({'early stop' if log.stopped_early else 'iteration limit'}), {splats.count} splats")
    if len(metrics):
        CONSOLE.print(f"📊 Held-out PSNR {metrics['psnr'].mean():.2f} dB, SSIM {metrics['ssim'].mean():.4f} "
                      f"over {len(metrics)} views")
    return {"status": "ok", "exit_code": 0, "splats": splats, "log": log, "metrics": metrics,
            "output_dir": output_dir}


def run_render(checkpoint: Path | str, manifest_path: Path | str, output_dir: Path | str,
               view_ids: list[int] | None = None, background=(0.0, 0.0, 0.0), threads: int | None = None) -> dict:
    """Render PNG color and PFM depth for the chosen views (all views by default)."""
    banner("🖼️ RENDER")
    output_dir = Path(output_dir)
    try:
        splats = import_ply(checkpoint)
        scene = stage_scene(manifest_path)
        cameras = scene["cameras"]
        if view_ids:
            by_id = {camera.id: camera for camera in cameras}
            unknown = [v for v in view_ids if v not in by_id]
            if unknown:
                raise InputError(f"unknown view id(s) {unknown}")
            cameras = [by_id[v] for v in view_ids]
        if splats.count == 0:
            warnings.warn(f"checkpoint {checkpoint} holds no splats; rendering background only")
        (output_dir / "images").mkdir(parents=True, exist_ok=True)
        (output_dir / "depths").mkdir(parents=True, exist_ok=True)
        rows = []
        for camera in cameras:
            output = render(splats, camera, background, threads=threads)
            save_image(output_dir / "images" / f"{camera.stem}.png", output.color)
            write_pfm(output_dir / "depths" / f"{camera.stem}.pfm", output.depth)
            rows.append({"view": camera.id, "name": camera.name,
                         "coverage": float(np.mean(output.coverage))})
            CONSOLE.print(f"   • view {camera.id} ({camera.name}) rendered")
    except FewShotSplatError as e:
        return _failed("render", e)
    report = pd.DataFrame(rows, columns=["view", "name", "coverage"])
    report.to_csv(output_dir / "render_report.csv", index=False)
    CONSOLE.print(f"\n✅ Rendered {len(rows)} views to {output_dir}")
    return {"status": "ok", "exit_code": 0, "report": report}


def collect_metrics(run_dirs: list[Path | str]) -> pd.DataFrame:
    """Concatenate metrics.csv of training runs; a run without one contributes a NaN row."""
    frames = []
    for run_dir in map(Path, run_dirs):
        path = run_dir / "metrics.csv"
        if path.exists():
            frames.append(pd.read_csv(path))
            continue
        manifest_path = run_dir / "run_manifest.json"
        if not manifest_path.exists():
            raise InputError(f"{run_dir} is not a training run directory")
        meta = json.loads(manifest_path.read_text(encoding="utf-8"))
        frames.append(pd.DataFrame([{"scene": meta["scene"], "k": meta["k"], "seed": meta["seed"],
                                     "view": -1, "psnr": np.nan, "ssim": np.nan}]))
    if not frames:
        raise InputError("no training runs to aggregate")
    return pd.concat(frames, ignore_index=True)[RESULT_COLUMNS]


def run_eval(run_dirs: list[Path | str], output_dir: Path | str, expected_seeds: list[int] | None = None) -> dict:
    """LOAD STEP: aggregate run metrics into results.csv, summary tables and an aligned text table."""
    banner("📊 EVALUATE")
    try:
        results = collect_metrics(run_dirs)
        report = aggregate(results, expected_seeds)
        paths = write_results(report, output_dir)
    except FewShotSplatError as e:
        return _failed("eval", e)
    CONSOLE.print(format_table(report))
    CONSOLE.print(f"\n✅ Results written to {paths['results']}")
    return {"status": "ok", "exit_code": 0, "report": report, "paths": paths}


def run_synth(output_dir: Path | str, width: int = 128, height: int = 96, seed: int = 0,
              noise: float = 0.05, name: str = "synthetic") -> dict:
    """Write the procedural three-plane scene with its manifest."""
    banner("🧪 SYNTH: procedural three-plane scene")
    try:
        scene = make_scene(width, height, seed, noise)
        manifest_path = write_scene(scene, output_dir, name)
    except FewShotSplatError as e:
        return _failed("synth", e)
    CONSOLE.print(f"✅ {len(scene.cameras)} views, {len(scene.points)} SfM points -> {manifest_path}")
    return {"status": "ok", "exit_code": 0, "manifest": manifest_path, "scene": scene}
