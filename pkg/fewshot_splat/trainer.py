"""
Optimization loop: per-iteration render, loss, backward and Adam step, with
periodic densification/pruning and depth-loss early stopping.

Few-shot changes to the usual splat schedule: SH capped at degree 1, no
periodic opacity reset (available behind a toggle), early stop on the moving
average of the depth loss.
"""
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rich.progress import Progress, BarColumn, TextColumn, TimeElapsedColumn

from fewshot_splat.config import TrainConfig, write_config
from fewshot_splat.console import CONSOLE
from fewshot_splat.depth_prior import DepthPrior, EdgeMask
from fewshot_splat.errors import InputError, NumericalError
from fewshot_splat.losses import (LossWeights, color_l1, dssim, depth_l1, sparse_depth_l1, smoothness,
                                  combine, loss_curve_frame)
from fewshot_splat.rasterizer import render, render_backward, quaternion_to_rotmat, SplatGradients
from fewshot_splat.scene_io import Camera, SparseDepthMap
from fewshot_splat.splats import SplatSet, export_ply, logit

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6
SH_DEGREE_INTERVAL = 1000
RESET_OPACITY = 0.01
EXTENT_MARGIN = 1.1


@dataclass(eq=False)
class TrainingView:
    camera: Camera
    image: np.ndarray


@dataclass(eq=False)
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    iterations: int = 0
    densify_events: list[dict] = field(default_factory=list)

    def frame(self):
        return loss_curve_frame(self.rows)


class EarlyStopState:
    """
    Ring buffer of the last `window` depth-loss values and the best moving
    average seen so far. A moving average counts as an improvement when it is
    below the best by at least `min_delta`.
    """

    def __init__(self, window: int = 100, patience: int = 5, min_delta: float = 1e-6):
        if window < 1 or patience < 1:
            raise InputError("early stop window and patience must be >= 1")
        self.window = window
        self.patience = patience
        self.min_delta = min_delta
        self.values = deque(maxlen=window)
        self.best = float("inf")
        self.since_best = 0

    @property
    def moving_average(self) -> float | None:
        if len(self.values) < self.window:
            return None
        return float(np.mean(self.values))


def early_stop_step(state: EarlyStopState, depth_loss: float) -> bool:
    """
    Push one depth-loss value.

    Returns:
        bool: True when optimization should halt
    """
    state.values.append(float(depth_loss))
    average = state.moving_average
    if average is None:
        return False
    if average < state.best - state.min_delta:
        state.since_best = 0
    else:
        state.since_best += 1
    state.best = min(state.best, average)
    return state.since_best >= state.patience


class AdamOptimizer:
    """Per-field Adam moments for a SplatSet; moments follow splats through densification."""

    def __init__(self, splats: SplatSet):
        self.step_count = 0
        self.first = {k: np.zeros_like(v) for k, v in splats.arrays().items()}
        self.second = {k: np.zeros_like(v) for k, v in splats.arrays().items()}

    def step(self, splats: SplatSet, gradients: dict[str, np.ndarray], rates: dict[str, float]) -> None:
        self.step_count += 1
        t = self.step_count
        for name, grad in gradients.items():
            m = self.first[name] = ADAM_BETA1 * self.first[name] + (1 - ADAM_BETA1) * grad
            v = self.second[name] = ADAM_BETA2 * self.second[name] + (1 - ADAM_BETA2) * grad * grad
            m_hat = m / (1 - ADAM_BETA1 ** t)
            v_hat = v / (1 - ADAM_BETA2 ** t)
            setattr(splats, name, getattr(splats, name) - rates[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS))

    def remap(self, origin: np.ndarray) -> None:
        """Rebuild moments for a densified set; `origin` is -1 for new splats."""
        known = origin >= 0
        for moments in (self.first, self.second):
            for name, values in moments.items():
                fresh = np.zeros((len(origin),) + values.shape[1:])
                fresh[known] = values[origin[known]]
                moments[name] = fresh

    def reset(self, name: str) -> None:
        self.first[name][:] = 0.0
        self.second[name][:] = 0.0


@dataclass
class DensifyStats:
    clones: int
    splits: int
    pruned: int
    origin: np.ndarray


def scene_extent(cameras: list[Camera]) -> float:
    """1.1 x the largest camera distance from the mean camera centre (1.0 when degenerate)."""
    centers = np.stack([camera.center for camera in cameras])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return EXTENT_MARGIN * radius if radius > 1e-6 else 1.0


def position_lr(config: TrainConfig, iteration: int, extent: float) -> float:
    """Log-linear decay from position_lr_init to position_lr_final, scaled by the scene extent."""
    t = np.clip(iteration / max(config.position_lr_max_steps, 1), 0.0, 1.0)
    rate = np.exp(np.log(config.position_lr_init) * (1 - t) + np.log(config.position_lr_final) * t)
    return float(rate * extent)


def _split_children(parents: SplatSet, rng: np.random.Generator) -> SplatSet:
    children = parents.select(np.repeat(np.arange(parents.count), SPLIT_CHILDREN))
    if children.count == 0:
        return children
    scales = np.exp(children.log_scales)
    offsets = rng.normal(size=(children.count, 3)) * scales
    rotations = quaternion_to_rotmat(children.rotations)
    children.positions = children.positions + np.einsum("nij,nj->ni", rotations, offsets)
    children.log_scales = np.log(scales / SPLIT_SCALE_DIVISOR)
    return children


def densify_and_prune(splats: SplatSet, grad_norms: np.ndarray, config: TrainConfig, extent: float,
                      rng: np.random.Generator) -> tuple[SplatSet, DensifyStats]:
    """
    Clone small high-gradient splats, split large ones into two children with
    scale / 1.6 and positions drawn from the parent Gaussian, then prune splats
    whose opacity is below the threshold. Opacities are never reset here.

    Args:
        splats: Current splats
        grad_norms: Averaged screen-space position-gradient norm per splat
        config: Thresholds (densify_grad_threshold, percent_dense, prune_opacity)
        extent: Scene extent used to call a splat large
        rng: Generator for child positions

    Returns:
        tuple: (new SplatSet, DensifyStats with counts and the origin index of every output splat)
    """
    grad_norms = np.asarray(grad_norms, dtype=np.float64).reshape(-1)
    if len(grad_norms) != splats.count:
        raise InputError(f"{len(grad_norms)} gradient norms for {splats.count} splats")
    high = grad_norms >= config.densify_grad_threshold
    large = splats.scales.max(axis=1, initial=0.0) > config.percent_dense * extent
    clone_mask = high & ~large
    split_mask = high & large

    indices = np.arange(splats.count)
    grown = (
        splats.select(~split_mask)
        .extend(splats.select(clone_mask))
        .extend(_split_children(splats.select(split_mask), rng))
    )
    origin = np.concatenate([
        indices[~split_mask],
        np.full(int(clone_mask.sum()), -1),
        np.full(SPLIT_CHILDREN * int(split_mask.sum()), -1),
    ])

    keep = grown.opacities >= config.prune_opacity
    stats = DensifyStats(
        clones=int(clone_mask.sum()),
        splits=int(split_mask.sum()),
        pruned=int((~keep).sum()),
        origin=origin[keep],
    )
    return grown.select(keep), stats


def reset_opacity(splats: SplatSet, optimizer: AdamOptimizer) -> None:
    """Clamp every opacity to at most RESET_OPACITY and clear its Adam moments."""
    splats.opacity_logits = np.minimum(splats.opacity_logits, logit(RESET_OPACITY))
    optimizer.reset("opacity_logits")


def save_checkpoint(splats: SplatSet, config: TrainConfig, iteration: int, directory: Path | str) -> Path:
    """Write splats.ply, config.txt and iteration.json under directory/iteration_<n>."""
    target = Path(directory) / f"iteration_{iteration}"
    target.mkdir(parents=True, exist_ok=True)
    export_ply(splats, target / "splats.ply")
    write_config(config, target / "config.txt")
    (target / "iteration.json").write_text(
        json.dumps({"iteration": iteration, "splats": splats.count}, indent=2) + "\n", encoding="utf-8")
    return target


def _learning_rates(config: TrainConfig, iteration: int, extent: float) -> dict[str, float]:
    return {
        "positions": position_lr(config, iteration, extent),
        "log_scales": config.scaling_lr,
        "rotations": config.rotation_lr,
        "opacity_logits": config.opacity_lr,
        "sh": config.feature_lr,
    }


def _check_gradients(gradients: SplatGradients, iteration: int) -> None:
    for name, values in gradients.arrays().items():
        if not np.isfinite(values).all():
            raise NumericalError(f"gradient:{name}", iteration, float("nan"))


def train(views: list[TrainingView], priors: dict[int, DepthPrior], masks: dict[int, EdgeMask],
          init: SplatSet, config: TrainConfig, sparse: dict[int, SparseDepthMap] | None = None,
          checkpoint_dir: Path | str | None = None, show_progress: bool = False) -> tuple[SplatSet, TrainingLog]:
    """
    Optimize `init` against the training views.

    Views are visited round-robin. The depth term uses the aligned prior of the
    view (or its sparse SfM depths when depth_target is 'sparse'); the smoothness
    term uses its edge mask.

    Args:
        views: Training cameras with their images (float RGB in [0, 1])
        priors: Aligned depth priors by view id
        masks: Edge masks by view id
        init: Initial splats (not modified)
        config: Training configuration
        sparse: Sparse depth maps by view id, for depth_target 'sparse'
        checkpoint_dir: Where periodic and final checkpoints go (None disables them)
        show_progress: Draw a progress bar on the console

    Returns:
        tuple: (optimized SplatSet, TrainingLog)
    """
    config.validate()
    if not views:
        raise InputError("training needs at least one view")
    depth_on = config.depth_loss
    for view in views:
        view_id = view.camera.id
        if depth_on and config.depth_target == "dense" and view_id not in priors:
            raise InputError(f"depth loss is enabled but view {view_id} ({view.camera.name}) has no depth prior")
        if depth_on and config.depth_target == "sparse" and (sparse is None or view_id not in sparse):
            raise InputError(f"sparse depth target is enabled but view {view_id} has no sparse depth")
        if config.smooth_loss and view_id not in masks:
            raise InputError(f"smoothness loss is enabled but view {view_id} ({view.camera.name}) has no edge mask")

    log = TrainingLog()
    splats = init.copy()
    if config.max_iterations == 0:
        return splats, log

    weights = LossWeights(config.lambda_ssim, config.lambda_depth, config.lambda_smooth)
    extent = scene_extent([view.camera for view in views])
    rng = np.random.default_rng(config.seed)
    optimizer = AdamOptimizer(splats)
    stopper = EarlyStopState(config.early_stop_window, config.early_stop_patience, config.early_stop_min_delta)
    grad_accum = np.zeros(splats.count)
    grad_denom = np.zeros(splats.count)

    progress = Progress(TextColumn("[bold]train"), BarColumn(), TextColumn("{task.completed}/{task.total}"),
                        TextColumn("{task.fields[loss]}"), TimeElapsedColumn(),
                        console=CONSOLE, transient=True, disable=not show_progress)
    with progress:
        task = progress.add_task("train", total=config.max_iterations, loss="")
        for iteration in range(1, config.max_iterations + 1):
            view = views[(iteration - 1) % len(views)]
            camera = view.camera
            output = render(splats, camera, config.background, config.tile_size, config.threads)

            parts = {"color": color_l1(output.color, view.image), "dssim": dssim(output.color, view.image)}
            if depth_on and config.depth_target == "dense":
                parts["depth"] = depth_l1(output.depth, priors[camera.id], output.transmittance,
                                          config.depth_coverage)
            elif depth_on:
                parts["depth"] = sparse_depth_l1(output.depth, sparse[camera.id])
            if config.smooth_loss:
                parts["smooth"] = smoothness(output.depth, masks[camera.id])
            report = combine(parts, weights)
            report.check_finite(iteration)

            gradients = render_backward(output, report.grad_color, report.grad_depth)
            _check_gradients(gradients, iteration)
            if min(config.sh_degree, iteration // SH_DEGREE_INTERVAL) < 1:
                gradients.sh[:, 1:, :] = 0.0

            in_window = config.densify and iteration < config.densify_until
            if in_window:
                ndc = gradients.means2d * np.array([camera.width / 2.0, camera.height / 2.0])
                grad_accum[gradients.visible] += np.linalg.norm(ndc[gradients.visible], axis=1)
                grad_denom[gradients.visible] += 1

            optimizer.step(splats, gradients.arrays(), _learning_rates(config, iteration, extent))
            splats.normalize_rotations()

            if in_window and iteration >= config.densify_from and iteration % config.densify_interval == 0:
                averaged = np.where(grad_denom > 0, grad_accum / np.maximum(grad_denom, 1), 0.0)
                splats, stats = densify_and_prune(splats, averaged, config, extent, rng)
                optimizer.remap(stats.origin)
                grad_accum = np.zeros(splats.count)
                grad_denom = np.zeros(splats.count)
                log.densify_events.append({"iteration": iteration, "clones": stats.clones,
                                           "splits": stats.splits, "pruned": stats.pruned,
                                           "splats": splats.count})

            if config.opacity_reset and iteration % config.opacity_reset_interval == 0:
                reset_opacity(splats, optimizer)

            log.rows.append({"iteration": iteration, "view": camera.id, **report.terms(), "splats": splats.count})
            log.iterations = iteration
            progress.update(task, advance=1, loss=f"{report.total:.5f}")

            if checkpoint_dir is not None and config.checkpoint_every and iteration % config.checkpoint_every == 0:
                save_checkpoint(splats, config, iteration, checkpoint_dir)

            if depth_on and config.early_stop and early_stop_step(stopper, report.depth):
                log.stopped_early = True
                CONSOLE.print(f"early stop at iteration {iteration}: depth-loss moving average "
                              f"{stopper.moving_average:.6g} has not improved for {config.early_stop_patience} steps")
                break

    return splats, log
