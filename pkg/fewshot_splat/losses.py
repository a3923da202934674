"""
Training objectives. Every loss returns its value together with the gradient
with respect to the rendered image (or rendered depth), so the trainer can
feed the rasterizer backward pass directly.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import ndimage

from fewshot_splat.config import require
from fewshot_splat.depth_prior import DepthPrior, EdgeMask
from fewshot_splat.errors import NumericalError
from fewshot_splat.scene_io import SparseDepthMap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEPTH_COVERAGE = 0.5
LOSS_CURVE_COLUMNS = ["iteration", "view", "color", "dssim", "depth", "smooth", "total", "splats"]


class LossTerm(NamedTuple):
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.1
    lambda_smooth: float = 0.01

    def __post_init__(self):
        require(0.0 <= self.lambda_ssim <= 1.0, f"lambda_ssim must lie in [0, 1], got {self.lambda_ssim}")
        require(self.lambda_depth >= 0 and self.lambda_smooth >= 0, "depth and smoothness weights must be >= 0")


@dataclass(eq=False)
class LossReport:
    """
    Weighted total of the four terms and the combined gradients.
    Terms that were not computed are None and appear as NaN in terms().
    """
    color: float
    dssim: float
    depth: float | None
    smooth: float | None
    total: float
    grad_color: np.ndarray
    grad_depth: np.ndarray

    def terms(self) -> dict[str, float]:
        return {"color": self.color, "dssim": self.dssim,
                "depth": np.nan if self.depth is None else self.depth,
                "smooth": np.nan if self.smooth is None else self.smooth, "total": self.total}

    def check_finite(self, iteration: int) -> None:
        """Raise NumericalError naming the first non-finite term."""
        for term, value in self.terms().items():
            if getattr(self, term) is not None and not np.isfinite(value):
                raise NumericalError(term, iteration, value)
        if not (np.isfinite(self.grad_color).all() and np.isfinite(self.grad_depth).all()):
            raise NumericalError("gradient", iteration, float("nan"))


def color_l1(rendered: np.ndarray, target: np.ndarray) -> LossTerm:
    require(rendered.shape == target.shape, f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return LossTerm(float(np.mean(np.abs(diff))), np.sign(diff) / diff.size)


def _window() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    weights = np.exp(-(offsets ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return weights / weights.sum()


def _blur(image: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over the two image axes, zero padded."""
    window = _window()
    out = ndimage.correlate1d(image, window, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def _ssim_parts(a: np.ndarray, b: np.ndarray):
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    lum_num = 2 * mu_a * mu_b + c1
    lum_den = mu_a * mu_a + mu_b * mu_b + c1
    cs_num = 2 * cov + c2
    cs_den = var_a + var_b + c2
    ssim = lum_num * cs_num / (lum_den * cs_den)
    return ssim, mu_a, mu_b, lum_num, lum_den, cs_num, cs_den


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM of two range-1 images (H, W) or (H, W, C)."""
    require(a.shape == b.shape, f"image shapes differ: {a.shape} vs {b.shape}")
    return _ssim_parts(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))[0]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over pixels and channels."""
    return float(np.mean(ssim_map(a, b)))


def dssim(rendered: np.ndarray, target: np.ndarray) -> LossTerm:
    """
    (1 - SSIM) / 2 with its exact gradient with respect to `rendered`.

    Window statistics are linear filters, so the gradient is the same
    symmetric window applied to the per-pixel partials of the SSIM map.
    """
    require(rendered.shape == target.shape, f"image shapes differ: {rendered.shape} vs {target.shape}")
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    value, mu_x, mu_y, lum_num, lum_den, cs_num, cs_den = _ssim_parts(x, y)

    d_mu = 2 * mu_y * cs_num / (lum_den * cs_den) - 2 * mu_x * value / lum_den
    d_var = -value / cs_den
    d_cov = 2 * lum_num / (lum_den * cs_den)
    # var and cov also depend on mu_x through their -mu^2 and -mu_x*mu_y parts
    d_mu_total = d_mu - 2 * mu_x * d_var - mu_y * d_cov
    grad_ssim = _blur(d_mu_total) + 2 * x * _blur(d_var) + y * _blur(d_cov)

    n = value.size
    return LossTerm(float((1.0 - np.mean(value)) / 2.0), -0.5 * grad_ssim / n)


def depth_l1(rendered_depth: np.ndarray, prior: DepthPrior, transmittance: np.ndarray,
             coverage: float = DEPTH_COVERAGE) -> LossTerm:
    """
    Mean |D - D_prior| over pixels whose accumulated alpha exceeds `coverage`.
    No covered pixels gives loss 0 and a zero gradient.
    """
    target = prior.aligned
    require(rendered_depth.shape == target.shape == transmittance.shape,
            f"depth shapes differ: rendered {rendered_depth.shape}, prior {target.shape}, "
            f"transmittance {transmittance.shape}")
    covered = (1.0 - transmittance) > coverage
    count = int(covered.sum())
    gradient = np.zeros_like(rendered_depth, dtype=np.float64)
    if count == 0:
        return LossTerm(0.0, gradient)
    diff = np.where(covered, rendered_depth - target, 0.0)
    gradient[covered] = np.sign(diff[covered]) / count
    return LossTerm(float(np.abs(diff).sum() / count), gradient)


def sparse_depth_l1(rendered_depth: np.ndarray, sparse: SparseDepthMap) -> LossTerm:
    """Mean |D - d| at the SfM sample pixels of one view."""
    gradient = np.zeros_like(rendered_depth, dtype=np.float64)
    if len(sparse) == 0:
        return LossTerm(0.0, gradient)
    height, width = rendered_depth.shape
    cols = np.rint(sparse.pixels[:, 0]).astype(np.int64)
    rows = np.rint(sparse.pixels[:, 1]).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    if not inside.any():
        return LossTerm(0.0, gradient)
    rows, cols, depths = rows[inside], cols[inside], sparse.depths[inside]
    diff = rendered_depth[rows, cols] - depths
    np.add.at(gradient, (rows, cols), np.sign(diff) / len(diff))
    return LossTerm(float(np.mean(np.abs(diff))), gradient)


def smoothness(rendered_depth: np.ndarray, mask: EdgeMask) -> LossTerm:
    """
    Squared depth differences over right/down neighbour pairs where neither
    pixel is an edge, divided by the number of such pairs.
    """
    edges = mask.mask
    require(edges.shape == rendered_depth.shape,
            f"edge mask {edges.shape} does not match depth {rendered_depth.shape}")
    depth = np.asarray(rendered_depth, dtype=np.float64)
    flat = ~edges
    right = flat[:, :-1] & flat[:, 1:]
    down = flat[:-1, :] & flat[1:, :]
    pairs = int(right.sum() + down.sum())
    gradient = np.zeros_like(depth)
    if pairs == 0:
        return LossTerm(0.0, gradient)

    dx = np.where(right, depth[:, 1:] - depth[:, :-1], 0.0)
    dy = np.where(down, depth[1:, :] - depth[:-1, :], 0.0)
    value = (np.sum(dx * dx) + np.sum(dy * dy)) / pairs
    gradient[:, 1:] += 2 * dx / pairs
    gradient[:, :-1] -= 2 * dx / pairs
    gradient[1:, :] += 2 * dy / pairs
    gradient[:-1, :] -= 2 * dy / pairs
    return LossTerm(float(value), gradient)


def combine(parts: dict[str, LossTerm], weights: LossWeights) -> LossReport:
    """
    total = (1 - l_ssim) * color + l_ssim * dssim + l_depth * depth + l_smooth * smooth

    Args:
        parts: Terms by name ('color' and 'dssim' required; 'depth', 'smooth' optional)
        weights: Loss weights

    Returns:
        LossReport: Term values, total and the combined image/depth gradients
    """
    require("color" in parts and "dssim" in parts, "color and dssim terms are required")
    color, structure = parts["color"], parts["dssim"]
    depth, smooth = parts.get("depth"), parts.get("smooth")

    grad_color = (1.0 - weights.lambda_ssim) * color.gradient + weights.lambda_ssim * structure.gradient
    grad_depth = np.zeros(grad_color.shape[:2])
    total = (1.0 - weights.lambda_ssim) * color.value + weights.lambda_ssim * structure.value
    if depth is not None:
        total += weights.lambda_depth * depth.value
        grad_depth = grad_depth + weights.lambda_depth * depth.gradient
    if smooth is not None:
        total += weights.lambda_smooth * smooth.value
        grad_depth = grad_depth + weights.lambda_smooth * smooth.gradient

    return LossReport(
        color=color.value,
        dssim=structure.value,
        depth=depth.value if depth is not None else None,
        smooth=smooth.value if smooth is not None else None,
        total=float(total),
        grad_color=grad_color,
        grad_depth=grad_depth,
    )


def loss_curve_frame(rows: list[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=LOSS_CURVE_COLUMNS)


def write_loss_curve(rows: list[dict], path: Path | str) -> Path:
    """
    Write per-iteration loss rows as CSV.

    Columns are LOSS_CURVE_COLUMNS; a depth or smooth cell is empty when that
    term was switched off for the run.
    """
    path = Path(path)
    loss_curve_frame(rows).to_csv(path, index=False, float_format="%.10g")
    return path
