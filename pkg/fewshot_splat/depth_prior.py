"""
Dense depth priors: raw monocular depth aligned to sparse SfM depth, plus the
Canny edge mask used by the smoothness loss.

Raw depth files are produced outside this package (one per image, named by the
image stem). Aligned priors are stored as PFM with a JSON sidecar.
"""
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from fewshot_splat.config import DepthFitConfig
from fewshot_splat.errors import InputError, UnsupportedFormatError, CorruptFileError, DegenerateFitError
from fewshot_splat.scene_io import SparseDepthMap


@dataclass(eq=False)
class RawDepthMap:
    """Relative depth for one view, as produced by an external estimator."""
    view_id: int
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise InputError(f"raw depth for view {self.view_id} contains non-finite values")


@dataclass(eq=False)
class DepthPrior:
    """Metric depth prior: aligned = scale * raw + offset."""
    view_id: int
    scale: float
    offset: float
    aligned: np.ndarray
    residual: float = 0.0
    source: str = ""

    def __post_init__(self):
        # PFM precision
        self.aligned = np.asarray(self.aligned, dtype=np.float32)


@dataclass(eq=False)
class EdgeMask:
    view_id: int
    mask: np.ndarray


def _sample(raw: RawDepthMap, sparse: SparseDepthMap) -> np.ndarray:
    height, width = raw.values.shape
    xs, ys = sparse.pixels[:, 0], sparse.pixels[:, 1]
    if len(xs) and (xs.min() < 0 or ys.min() < 0 or xs.max() >= width or ys.max() >= height):
        raise InputError(f"view {raw.view_id}: sparse samples fall outside the raw depth map")
    return raw.values[ys, xs]


def _fit_terms(raw: RawDepthMap, sparse: SparseDepthMap, weighting: str):
    """Sampled raw depth, regression targets and per-sample weights for the chosen weighting."""
    r = _sample(raw, sparse)
    if weighting == "literal":
        # weight multiplies the sparse depth inside the residual
        return r, sparse.weights * sparse.depths, np.ones_like(r)
    if weighting == "residual":
        return r, sparse.depths, sparse.weights
    raise InputError(f"unknown weighting '{weighting}'")


def fit_objective(raw: RawDepthMap, sparse: SparseDepthMap, scale: float, offset: float,
                  weighting: str = "literal") -> float:
    """Value of the alignment objective at (scale, offset)."""
    r, target, w = _fit_terms(raw, sparse, weighting)
    return float(np.sum(w * (target - (scale * r + offset)) ** 2))


def _residual(r, target, w, scale, offset) -> float:
    if w.sum() <= 0:
        return 0.0
    return float(np.sqrt(np.sum(w * (target - (scale * r + offset)) ** 2) / np.sum(w)))


def fit_scale_offset(raw: RawDepthMap, sparse: SparseDepthMap,
                     weighting: str = "literal") -> tuple[float, float, float]:
    """
    Closed-form least-squares scale and offset mapping raw depth onto sparse depth.

    Args:
        raw: Relative depth of the view
        sparse: Projected SfM samples of the same view
        weighting: 'literal' fits s*raw+t to w*D_sparse with unit weights;
                   'residual' fits s*raw+t to D_sparse with weights w

    Returns:
        (scale, offset, residual): residual is the weighted RMS at the optimum
    """
    r, target, w = _fit_terms(raw, sparse, weighting)
    active = w > 0
    if active.sum() < 2:
        raise DegenerateFitError(f"view {raw.view_id}: {int(active.sum())} sparse sample(s), need at least 2")
    if np.ptp(r[active]) == 0:
        raise DegenerateFitError(f"view {raw.view_id}: sampled raw depths are all identical")

    # 2x2 normal equations
    normal = np.array([[np.sum(w * r * r), np.sum(w * r)],
                       [np.sum(w * r), np.sum(w)]])
    rhs = np.array([np.sum(w * r * target), np.sum(w * target)])
    scale, offset = np.linalg.solve(normal, rhs)
    return float(scale), float(offset), _residual(r, target, w, scale, offset)


def fit_offset_only(raw: RawDepthMap, sparse: SparseDepthMap,
                    weighting: str = "literal") -> tuple[float, float, float]:
    """Fallback fit with scale fixed to 1."""
    r, target, w = _fit_terms(raw, sparse, weighting)
    if len(r) == 0 or w.sum() <= 0:
        raise DegenerateFitError(f"view {raw.view_id}: no sparse samples to fit the depth prior")
    offset = float(np.sum(w * (target - r)) / np.sum(w))
    return 1.0, offset, _residual(r, target, w, 1.0, offset)


def align_depth(raw: RawDepthMap, sparse: SparseDepthMap, config: DepthFitConfig | None = None) -> DepthPrior:
    """
    Build the metric prior of one view.

    Falls back to an offset-only fit (with a warning) when the full fit is
    underdetermined; with no samples at all the view is rejected. With
    config.adjust off, the raw depth is used as-is.
    """
    config = config or DepthFitConfig()
    if not config.adjust:
        scale, offset = 1.0, 0.0
        if len(sparse):
            r, target, w = _fit_terms(raw, sparse, config.weighting)
            residual = _residual(r, target, w, scale, offset)
        else:
            residual = 0.0
    else:
        try:
            scale, offset, residual = fit_scale_offset(raw, sparse, config.weighting)
        except DegenerateFitError as e:
            if len(sparse) == 0:
                raise
            warnings.warn(f"{e}; falling back to offset-only fit", stacklevel=2)
            scale, offset, residual = fit_offset_only(raw, sparse, config.weighting)

    return DepthPrior(
        view_id=raw.view_id,
        scale=scale,
        offset=offset,
        aligned=scale * raw.values + offset,
        residual=residual,
        source=raw.source,
    )


def canny_edges(image: np.ndarray, low: float = 0.1, high: float = 0.2, sigma: float = 1.4,
                view_id: int = -1) -> EdgeMask:
    """
    Canny edges of an RGB image.

    Grayscale, Gaussian blur, Sobel gradients, non-maximum suppression and
    hysteresis. `low` and `high` are fractions of the largest gradient magnitude.
    """
    if not 0 <= low <= high:
        raise InputError(f"Canny thresholds must satisfy 0 <= low <= high, got {low}, {high}")
    image = np.asarray(image, dtype=np.float64)
    gray = image[..., :3] @ np.array([0.299, 0.587, 0.114]) if image.ndim == 3 else image
    blurred = ndimage.gaussian_filter(gray, sigma=sigma, mode="nearest")
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    magnitude = np.hypot(gx, gy)

    peak = magnitude.max() if magnitude.size else 0.0
    if peak <= 1e-12:
        return EdgeMask(view_id=view_id, mask=np.zeros(gray.shape, dtype=bool))

    # Quantize gradient direction into 0/45/90/135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    padded = np.pad(magnitude, 1, mode="constant")
    height, width = magnitude.shape
    suppressed = np.zeros_like(magnitude)
    for direction, (dy, dx) in offsets.items():
        forward = padded[1 + dy:1 + dy + height, 1 + dx:1 + dx + width]
        backward = padded[1 - dy:1 - dy + height, 1 - dx:1 - dx + width]
        keep = (sector == direction) & (magnitude >= forward) & (magnitude >= backward)
        suppressed[keep] = magnitude[keep]

    with np.errstate(invalid="ignore"):
        low_value, high_value = low * peak, high * peak
        candidates = (suppressed > 0) & (suppressed >= low_value)
        strong = candidates & (suppressed >= high_value)

    labels, count = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return EdgeMask(view_id=view_id, mask=np.zeros(gray.shape, dtype=bool))
    connected = np.zeros(count + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return EdgeMask(view_id=view_id, mask=connected[labels])


def read_pfm(path: Path | str) -> np.ndarray:
    """
    Read a grayscale PFM ("Pf") into an H x W float32 array, top row first.
    A positive scale means big-endian data.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"PFM file not found: {path}")
    data = path.read_bytes()
    lines, cursor = [], 0
    for _ in range(3):
        end = data.find(b"\n", cursor)
        if end < 0:
            raise CorruptFileError("malformed PFM header", path=path, offset=cursor)
        lines.append(data[cursor:end].decode("ascii", errors="replace").strip())
        cursor = end + 1

    if lines[0] == "PF":
        raise UnsupportedFormatError(f"{path}: color PFM ('PF') is not supported, expected grayscale 'Pf'")
    if lines[0] != "Pf":
        raise CorruptFileError(f"malformed PFM header '{lines[0]}'", path=path, offset=0)
    try:
        width, height = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise CorruptFileError("malformed PFM header", path=path)
    if width < 0 or height < 0 or scale == 0:
        raise CorruptFileError("malformed PFM header", path=path)

    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    expected = width * height * 4
    if len(data) - cursor < expected:
        raise CorruptFileError("truncated PFM data", path=path, offset=len(data))
    values = np.frombuffer(data, dtype=dtype, count=width * height, offset=cursor)
    # PFM stores rows bottom-to-top
    return np.flipud(values.reshape(height, width)).astype(np.float32)


def write_pfm(path: Path | str, values: np.ndarray) -> None:
    """Write an H x W map as little-endian grayscale PFM (scale -1.0)."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise InputError(f"PFM maps must be 2D, got shape {values.shape}")
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(values).tobytes())


def read_raw_depth(path: Path | str, view_id: int, depth_format: str = "pfm",
                   png_scale: float = 1.0 / 1000.0) -> RawDepthMap:
    """
    Read one raw relative depth map.

    Args:
        path: PFM or 16-bit PNG file
        view_id: Camera id the map belongs to
        depth_format: 'pfm' or 'png16'
        png_scale: Units per PNG count (png16 only)
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"raw depth not found for view {view_id}: {path}")
    if depth_format == "pfm":
        values = read_pfm(path)
    elif depth_format == "png16":
        try:
            with Image.open(path) as img:
                values = np.asarray(img, dtype=np.float64) * png_scale
        except (UnidentifiedImageError, OSError) as e:
            raise InputError(f"cannot read raw depth {path}: {e}")
        if values.ndim != 2:
            raise UnsupportedFormatError(f"{path}: depth PNG must be single-channel")
    else:
        raise InputError(f"unknown raw depth format '{depth_format}'")
    return RawDepthMap(view_id=view_id, values=values, source=str(path))


def raw_depth_path(depth_dir: Path | str, stem: str, depth_format: str = "pfm") -> Path:
    return Path(depth_dir) / f"{stem}.{'pfm' if depth_format == 'pfm' else 'png'}"


def write_prior(prior: DepthPrior, path: Path | str) -> Path:
    """
    Store a prior as PFM plus a JSON sidecar next to it.

    Sidecar schema: {"view_id": int, "scale": float, "offset": float,
                     "residual": float, "source": str}

    Returns:
        Path: The sidecar path
    """
    path = Path(path)
    write_pfm(path, prior.aligned)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "view_id": int(prior.view_id),
        "scale": float(prior.scale),
        "offset": float(prior.offset),
        "residual": float(prior.residual),
        "source": prior.source,
    }, indent=2), encoding="utf-8")
    return sidecar


def read_prior(path: Path | str, view_id: int | None = None) -> DepthPrior:
    """
    Read a prior written by write_prior. A PFM without a sidecar (for example a
    rendered depth) is read with scale 1, offset 0 and the given view id.
    """
    path = Path(path)
    aligned = read_pfm(path)
    sidecar = path.with_suffix(".json")
    meta = {"view_id": view_id if view_id is not None else -1, "scale": 1.0, "offset": 0.0,
            "residual": 0.0, "source": str(path)}
    if sidecar.exists():
        try:
            meta.update(json.loads(sidecar.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise CorruptFileError(f"malformed prior sidecar: {e}", path=sidecar)
    return DepthPrior(
        view_id=int(meta["view_id"]) if view_id is None else view_id,
        scale=float(meta["scale"]),
        offset=float(meta["offset"]),
        aligned=aligned,
        residual=float(meta["residual"]),
        source=str(meta.get("source", "")),
    )
