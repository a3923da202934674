"""
Configuration tables and settings for the few-shot splatting pipeline.

Holds the constant tables (COLMAP camera models, PLY field layout, training
defaults), the TrainConfig / DepthFitConfig dataclasses, flat key-value config
file parsing, and the scene manifest reader.
"""
import os
import types
import typing
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path

from dotenv import load_dotenv

from fewshot_splat.errors import InputError, ContractError

load_dotenv()

# COLMAP camera models: id -> (name, number of params).
# Only the pinhole models are supported; the rest are listed so that
# rejections can name the model that was found.
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
CAMERA_MODEL_IDS = {name: model_id for model_id, (name, _) in CAMERA_MODELS.items()}
SUPPORTED_CAMERA_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")

# Splat PLY layout as read by common splat viewers.
PLY_BASE_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + ["f_dc_0", "f_dc_1", "f_dc_2"]
)
PLY_TAIL_FIELDS = (
    ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
PLY_REQUIRED_FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] + PLY_TAIL_FIELDS

MAX_SH_DEGREE = 1

THREADS_ENV = "FEWSHOT_SPLAT_THREADS"


def default_threads() -> int:
    """
    Worker count for tile-parallel rendering.
    Reads FEWSHOT_SPLAT_THREADS (a .env file is honoured), else the CPU count.
    """
    value = os.getenv(THREADS_ENV)
    if value:
        try:
            threads = int(value)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got '{value}'")
        if threads < 1:
            raise InputError(f"{THREADS_ENV} must be >= 1, got {threads}")
        return threads
    return os.cpu_count() or 1


@dataclass
class TrainConfig:
    """
    Every knob of the optimization loop.
    Learning rates and densification schedule are the usual splatting defaults;
    the few-shot changes are sh_degree=1, opacity_reset off, early_stop on.
    """
    max_iterations: int = 30000
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    position_lr_max_steps: int = 30000
    feature_lr: float = 2.5e-3
    opacity_lr: float = 0.05
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset: bool = False
    opacity_reset_interval: int = 3000
    early_stop: bool = True
    early_stop_window: int = 100
    early_stop_patience: int = 5
    early_stop_min_delta: float = 1e-6
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.1
    lambda_smooth: float = 0.01
    depth_loss: bool = True
    smooth_loss: bool = True
    depth_coverage: float = 0.5
    depth_target: str = "dense"
    sh_degree: int = 1
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_size: int = 16
    threads: int | None = None
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        rates = {
            "position_lr_init": self.position_lr_init,
            "position_lr_final": self.position_lr_final,
            "feature_lr": self.feature_lr,
            "opacity_lr": self.opacity_lr,
            "scaling_lr": self.scaling_lr,
            "rotation_lr": self.rotation_lr,
        }
        for name, rate in rates.items():
            if not rate > 0:
                raise InputError(f"learning rate {name} must be > 0, got {rate}")
        if self.max_iterations < 0:
            raise InputError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.early_stop_window < 1:
            raise InputError(f"early_stop_window must be >= 1, got {self.early_stop_window}")
        if self.early_stop_patience < 1:
            raise InputError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InputError(f"lambda_ssim must lie in [0, 1], got {self.lambda_ssim}")
        if min(self.lambda_depth, self.lambda_smooth) < 0:
            raise InputError("lambda_depth and lambda_smooth must be nonnegative")
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise InputError(f"sh_degree is capped at {MAX_SH_DEGREE}, got {self.sh_degree}")
        if self.depth_target not in ("dense", "sparse"):
            raise InputError(f"depth_target must be 'dense' or 'sparse', got '{self.depth_target}'")
        if self.densify_interval < 1 or self.tile_size < 1:
            raise InputError("densify_interval and tile_size must be >= 1")
        return self


@dataclass
class DepthFitConfig:
    """
    Settings for aligning raw depth to sparse SfM depth and for the edge mask.
    Canny thresholds are fractions of the maximum gradient magnitude.
    raw_format / png_depth_scale override the scene manifest when set.
    """
    weighting: str = "literal"
    adjust: bool = True
    min_views: int = 3
    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.2
    raw_format: str | None = None
    png_depth_scale: float | None = None

    def validate(self) -> "DepthFitConfig":
        if self.weighting not in ("literal", "residual"):
            raise InputError(f"weighting must be 'literal' or 'residual', got '{self.weighting}'")
        if self.raw_format not in (None, "pfm", "png16"):
            raise InputError(f"raw depth format must be 'pfm' or 'png16', got '{self.raw_format}'")
        if self.min_views < 1:
            raise InputError(f"min_views must be >= 1, got {self.min_views}")
        if not 0 <= self.canny_low <= self.canny_high:
            raise InputError("Canny thresholds must satisfy 0 <= low <= high")
        return self


@dataclass
class SceneManifest:
    """Paths of one scene, as listed in a manifest file."""
    scene: str
    images: Path
    colmap: Path
    depths: Path | None = None
    depth_format: str = "pfm"
    depth_scale: float = 1.0 / 1000.0
    path: Path | None = field(default=None, compare=False)


def _coerce(value: str, annotation, key: str):
    """Convert a config-file string into the dataclass field type."""
    text = value.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(text, inner, key)
    if annotation is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise InputError(f"config key '{key}' expects a boolean, got '{value}'")
    if origin is tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != len(args):
            raise InputError(f"config key '{key}' expects {len(args)} comma-separated values")
        return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    try:
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
    except ValueError:
        raise InputError(f"config key '{key}' expects {annotation.__name__}, got '{value}'")
    return text


def read_key_values(path: Path | str) -> dict[str, str]:
    """
    Parse a flat `key = value` text file. Blank lines and `#` comments are ignored.

    Args:
        path: Config or manifest file

    Returns:
        dict: Raw string values by key, in file order
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def config_from_mapping(cls, values: dict, base=None):
    """
    Build a config dataclass from string (or already-typed) values.
    Unknown keys are an input error naming the key.
    """
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    typed = {}
    for key, value in values.items():
        if key not in known:
            raise InputError(f"unknown {cls.__name__} key '{key}'")
        typed[key] = _coerce(value, hints[key], key) if isinstance(value, str) else value
    config = replace(base, **typed) if base is not None else cls(**typed)
    return config.validate()


def load_train_config(path: Path | str | None = None, overrides: dict | None = None) -> TrainConfig:
    """
    Resolve a TrainConfig: defaults < config file < overrides (CLI flags win).

    Args:
        path: Optional flat key-value config file
        overrides: Field values set explicitly on the command line

    Returns:
        TrainConfig: Validated configuration
    """
    config = TrainConfig()
    if path is not None:
        config = config_from_mapping(TrainConfig, read_key_values(path), base=config)
    if overrides:
        config = config_from_mapping(TrainConfig, overrides, base=config)
    return config.validate()


def write_config(config, path: Path | str) -> None:
    """Write a config dataclass as flat `key = value` text (readable by read_key_values)."""
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path | str) -> SceneManifest:
    """
    Read a scene manifest. Relative paths resolve against the manifest directory.

    Schema:
        scene = fern
        images = images
        colmap = sparse/0
        depths = depth_raw          # optional
        depth_format = pfm          # pfm | png16
        depth_scale = 0.001         # png16 only
    """
    path = Path(path)
    values = read_key_values(path)
    for key in ("scene", "images", "colmap"):
        if key not in values:
            raise InputError(f"{path}: manifest is missing required key '{key}'")
    unknown = set(values) - {"scene", "images", "colmap", "depths", "depth_format", "depth_scale"}
    if unknown:
        raise InputError(f"{path}: unknown manifest key(s) {sorted(unknown)}")

    root = path.parent

    def resolve(value: str) -> Path:
        candidate = Path(value)
        return candidate if candidate.is_absolute() else root / candidate

    depth_format = values.get("depth_format", "pfm")
    if depth_format not in ("pfm", "png16"):
        raise InputError(f"{path}: depth_format must be 'pfm' or 'png16', got '{depth_format}'")
    try:
        depth_scale = float(values.get("depth_scale", 1.0 / 1000.0))
    except ValueError:
        raise InputError(f"{path}: depth_scale must be a number")

    return SceneManifest(
        scene=values["scene"],
        images=resolve(values["images"]),
        colmap=resolve(values["colmap"]),
        depths=resolve(values["depths"]) if "depths" in values else None,
        depth_format=depth_format,
        depth_scale=depth_scale,
        path=path,
    )


def write_manifest(manifest: SceneManifest, path: Path | str) -> None:
    lines = [
        f"scene = {manifest.scene}",
        f"images = {manifest.images}",
        f"colmap = {manifest.colmap}",
    ]
    if manifest.depths is not None:
        lines.append(f"depths = {manifest.depths}")
    lines.append(f"depth_format = {manifest.depth_format}")
    lines.append(f"depth_scale = {manifest.depth_scale!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def require(condition: bool, message: str) -> None:
    """Raise a ContractError when an API precondition does not hold."""
    if not condition:
        raise ContractError(message)
