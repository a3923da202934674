"""
Scene ingestion: COLMAP sparse models, training images, and per-view sparse depth.

A COLMAP image becomes one Camera (pose + intrinsics of its COLMAP camera);
Camera.id is the COLMAP image id, which is also what point tracks reference.
Pixel coordinates follow the rasterizer convention: pixel (i, j) is centred
on coordinate (i, j).
"""
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial.transform import Rotation

from fewshot_splat.config import CAMERA_MODELS, CAMERA_MODEL_IDS, SUPPORTED_CAMERA_MODELS
from fewshot_splat.errors import InputError, UnsupportedFormatError, CorruptFileError


@dataclass(eq=False)
class Camera:
    """One posed view: world->camera rotation/translation and pinhole intrinsics."""
    id: int
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray
    width: int
    height: int
    name: str = ""
    qvec: np.ndarray | None = None
    model: str = "PINHOLE"
    camera_id: int | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        if self.qvec is None:
            self.qvec = rotmat_to_qvec(self.rotation)
        if self.camera_id is None:
            self.camera_id = self.id

    @classmethod
    def from_qvec(cls, id: int, qvec, tvec, intrinsics, width: int, height: int, **kwargs) -> "Camera":
        qvec = np.asarray(qvec, dtype=np.float64)
        return cls(id=id, rotation=qvec_to_rotmat(qvec), translation=tvec, intrinsics=intrinsics,
                   width=width, height=height, qvec=qvec, **kwargs)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def stem(self) -> str:
        return Path(self.name).stem if self.name else str(self.id)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def validate(self) -> "Camera":
        """Check the orthonormal-rotation and upper-triangular-intrinsics invariants."""
        error = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if error >= 1e-6:
            raise InputError(f"camera {self.id}: rotation is not orthonormal (error {error:.2e})")
        K = self.intrinsics
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise InputError(f"camera {self.id}: intrinsics must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InputError(f"camera {self.id}: focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InputError(f"camera {self.id}: image size must be positive")
        return self


@dataclass(eq=False)
class SfmPoint:
    """A triangulated SfM point with its observations (image id, observed pixel)."""
    id: int
    position: np.ndarray
    reprojection_error: float
    track: list[tuple[int, tuple[float, float]]] = field(default_factory=list)
    color: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    @property
    def view_ids(self) -> set[int]:
        return {image_id for image_id, _ in self.track}


@dataclass(eq=False)
class SparseDepthMap:
    """Per-view sparse depth samples: pixels (n, 2) as (x, y), depths and weights."""
    view_id: int
    pixels: np.ndarray
    depths: np.ndarray
    weights: np.ndarray
    point_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.depths)


def qvec_to_rotmat(qvec) -> np.ndarray:
    """COLMAP quaternion (w, x, y, z) to a rotation matrix."""
    w, x, y, z = np.asarray(qvec, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def rotmat_to_qvec(rotation) -> np.ndarray:
    """Rotation matrix to a COLMAP quaternion (w, x, y, z) with w >= 0."""
    x, y, z, w = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
    qvec = np.array([w, x, y, z])
    return -qvec if w < 0 else qvec


def _intrinsics_from_params(model: str, params) -> np.ndarray:
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    else:
        fx, fy, cx, cy = params
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def _params_from_camera(camera: Camera) -> list[float]:
    if camera.model == "SIMPLE_PINHOLE":
        return [camera.fx, camera.cx, camera.cy]
    return [camera.fx, camera.fy, camera.cx, camera.cy]


def _check_model(name: str, path: Path) -> None:
    if name not in SUPPORTED_CAMERA_MODELS:
        raise UnsupportedFormatError(
            f"{path}: camera model {name} is not supported "
            f"(supported: {', '.join(SUPPORTED_CAMERA_MODELS)})"
        )


class _BinaryReader:
    """Sequential little-endian reader that reports the offset of truncated records."""

    def __init__(self, path: Path):
        self.path = path
        self.data = path.read_bytes()
        self.offset = 0

    def read(self, fmt: str) -> tuple:
        size = struct.calcsize("<" + fmt)
        if self.offset + size > len(self.data):
            raise CorruptFileError("truncated record", path=self.path, offset=self.offset)
        values = struct.unpack_from("<" + fmt, self.data, self.offset)
        self.offset += size
        return values

    def read_string(self) -> str:
        end = self.data.find(b"\x00", self.offset)
        if end < 0:
            raise CorruptFileError("unterminated string", path=self.path, offset=self.offset)
        text = self.data[self.offset:end].decode("utf-8")
        self.offset = end + 1
        return text


def _read_cameras_text(path: Path) -> dict[int, tuple[str, int, int, np.ndarray]]:
    cameras = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            camera_id, model = int(elems[0]), elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = [float(v) for v in elems[4:]]
        except (IndexError, ValueError):
            raise CorruptFileError(f"malformed camera line '{line}'", path=path)
        _check_model(model, path)
        if len(params) != CAMERA_MODELS[CAMERA_MODEL_IDS[model]][1]:
            raise CorruptFileError(f"camera {camera_id}: wrong parameter count for {model}", path=path)
        cameras[camera_id] = (model, width, height, _intrinsics_from_params(model, params))
    return cameras


def _read_cameras_binary(path: Path) -> dict[int, tuple[str, int, int, np.ndarray]]:
    reader = _BinaryReader(path)
    cameras = {}
    (num_cameras,) = reader.read("Q")
    for _ in range(num_cameras):
        record_offset = reader.offset
        camera_id, model_id, width, height = reader.read("iiQQ")
        if model_id not in CAMERA_MODELS:
            raise UnsupportedFormatError(f"{path}: unknown camera model id {model_id} at byte offset {record_offset}")
        model, num_params = CAMERA_MODELS[model_id]
        _check_model(model, path)
        params = reader.read("d" * num_params)
        cameras[camera_id] = (model, width, height, _intrinsics_from_params(model, params))
    return cameras


def _read_images_text(path: Path) -> dict[int, dict]:
    images = {}
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if not line.startswith("#")]
    i = 0
    while i < len(lines):
        header = lines[i].strip()
        i += 1
        if not header:
            continue
        points_line = lines[i].strip() if i < len(lines) else ""
        i += 1
        elems = header.split()
        try:
            image_id = int(elems[0])
            qvec = np.array([float(v) for v in elems[1:5]])
            tvec = np.array([float(v) for v in elems[5:8]])
            camera_id = int(elems[8])
            name = " ".join(elems[9:])
            values = points_line.split()
            xys = np.array([[float(values[k]), float(values[k + 1])] for k in range(0, len(values), 3)]).reshape(-1, 2)
            point_ids = np.array([int(values[k + 2]) for k in range(0, len(values), 3)], dtype=np.int64)
        except (IndexError, ValueError):
            raise CorruptFileError(f"malformed image record '{header}'", path=path)
        images[image_id] = {"qvec": qvec, "tvec": tvec, "camera_id": camera_id, "name": name,
                            "xys": xys, "point3d_ids": point_ids}
    return images


def _read_images_binary(path: Path) -> dict[int, dict]:
    reader = _BinaryReader(path)
    images = {}
    (num_images,) = reader.read("Q")
    for _ in range(num_images):
        props = reader.read("idddddddi")
        image_id = props[0]
        name = reader.read_string()
        (num_points2d,) = reader.read("Q")
        flat = reader.read("ddq" * num_points2d)
        xys = np.array([(flat[k], flat[k + 1]) for k in range(0, len(flat), 3)], dtype=np.float64).reshape(-1, 2)
        point_ids = np.array(flat[2::3], dtype=np.int64)
        images[image_id] = {"qvec": np.array(props[1:5]), "tvec": np.array(props[5:8]),
                            "camera_id": props[8], "name": name, "xys": xys, "point3d_ids": point_ids}
    return images


def _read_points_text(path: Path) -> list[dict]:
    points = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            point_id = int(elems[0])
            xyz = np.array([float(v) for v in elems[1:4]])
            rgb = tuple(int(v) for v in elems[4:7])
            error = float(elems[7])
            track = [(int(elems[k]), int(elems[k + 1])) for k in range(8, len(elems), 2)]
        except (IndexError, ValueError):
            raise CorruptFileError(f"malformed point line '{line}'", path=path)
        points.append({"id": point_id, "xyz": xyz, "rgb": rgb, "error": error, "track": track})
    return points


def _read_points_binary(path: Path) -> list[dict]:
    reader = _BinaryReader(path)
    points = []
    (num_points,) = reader.read("Q")
    for _ in range(num_points):
        props = reader.read("QdddBBBd")
        (track_length,) = reader.read("Q")
        flat = reader.read("ii" * track_length)
        track = [(flat[k], flat[k + 1]) for k in range(0, len(flat), 2)]
        points.append({"id": props[0], "xyz": np.array(props[1:4]), "rgb": tuple(props[4:7]),
                       "error": props[7], "track": track})
    return points


def _locate(model_dir: Path, stem: str) -> tuple[Path, bool]:
    binary = model_dir / f"{stem}.bin"
    text = model_dir / f"{stem}.txt"
    if binary.exists():
        return binary, True
    if text.exists():
        return text, False
    raise InputError(f"missing COLMAP file: {model_dir / stem}.(bin|txt)")


def parse_colmap(model_dir: Path | str) -> tuple[list[Camera], list[SfmPoint]]:
    """
    Parse a COLMAP sparse model (binary preferred when both layouts exist).

    Args:
        model_dir: Directory holding cameras, images and points3D files

    Returns:
        (cameras, points): one Camera per COLMAP image, sorted by id, and the
        SfM points in file order with tracks resolved to observed pixels
    """
    model_dir = Path(model_dir)
    if not model_dir.is_dir():
        raise InputError(f"COLMAP model directory not found: {model_dir}")

    cameras_path, cameras_bin = _locate(model_dir, "cameras")
    images_path, images_bin = _locate(model_dir, "images")
    points_path, points_bin = _locate(model_dir, "points3D")

    intrinsics = _read_cameras_binary(cameras_path) if cameras_bin else _read_cameras_text(cameras_path)
    images = _read_images_binary(images_path) if images_bin else _read_images_text(images_path)
    raw_points = _read_points_binary(points_path) if points_bin else _read_points_text(points_path)

    cameras = []
    for image_id in sorted(images):
        image = images[image_id]
        if image["camera_id"] not in intrinsics:
            raise CorruptFileError(f"image {image_id} references missing camera {image['camera_id']}",
                                   path=images_path)
        model, width, height, K = intrinsics[image["camera_id"]]
        cameras.append(Camera.from_qvec(
            image_id, image["qvec"], image["tvec"], K, int(width), int(height),
            name=image["name"], model=model, camera_id=image["camera_id"],
        ))

    points = []
    for raw in raw_points:
        track = []
        for image_id, point2d_idx in raw["track"]:
            image = images.get(image_id)
            if image is None:
                raise CorruptFileError(f"point {raw['id']} track references missing image {image_id}",
                                       path=points_path)
            if not 0 <= point2d_idx < len(image["xys"]):
                raise CorruptFileError(f"point {raw['id']} references missing 2D point {point2d_idx} "
                                       f"of image {image_id}", path=points_path)
            x, y = image["xys"][point2d_idx]
            track.append((image_id, (float(x), float(y))))
        points.append(SfmPoint(id=raw["id"], position=raw["xyz"], reprojection_error=raw["error"],
                               track=track, color=raw["rgb"]))

    return cameras, points


def _colmap_records(cameras: list[Camera], points: list[SfmPoint]):
    """Rebuild COLMAP camera/image/point records, assigning 2D point indices in track order."""
    intrinsics = {}
    for camera in cameras:
        intrinsics.setdefault(camera.camera_id, camera)
    observations = {camera.id: [] for camera in cameras}
    tracks = []
    for point in points:
        track = []
        for image_id, (x, y) in point.track:
            if image_id not in observations:
                raise InputError(f"point {point.id} observes unknown camera {image_id}")
            observations[image_id].append((x, y, point.id))
            track.append((image_id, len(observations[image_id]) - 1))
        tracks.append(track)
    return intrinsics, observations, tracks


def write_colmap_text(model_dir: Path | str, cameras: list[Camera], points: list[SfmPoint]) -> None:
    """Write cameras.txt / images.txt / points3D.txt; floats use repr() so re-parsing is exact."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    intrinsics, observations, tracks = _colmap_records(cameras, points)

    lines = ["# Camera list with one line of data per camera:",
             "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for camera_id, camera in intrinsics.items():
        params = " ".join(repr(float(v)) for v in _params_from_camera(camera))
        lines.append(f"{camera_id} {camera.model} {camera.width} {camera.height} {params}")
    (model_dir / "cameras.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["# Image list with two lines of data per image:",
             "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
             "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for camera in cameras:
        pose = " ".join(repr(float(v)) for v in [*camera.qvec, *camera.translation])
        lines.append(f"{camera.id} {pose} {camera.camera_id} {camera.name or camera.id}")
        lines.append(" ".join(f"{x!r} {y!r} {pid}" for x, y, pid in observations[camera.id]))
    (model_dir / "images.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["# 3D point list with one line of data per point:",
             "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for point, track in zip(points, tracks):
        rgb = point.color if point.color is not None else (128, 128, 128)
        xyz = " ".join(repr(float(v)) for v in point.position)
        entries = " ".join(f"{image_id} {idx}" for image_id, idx in track)
        lines.append(f"{point.id} {xyz} {rgb[0]} {rgb[1]} {rgb[2]} {float(point.reprojection_error)!r} {entries}")
    (model_dir / "points3D.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_colmap_binary(model_dir: Path | str, cameras: list[Camera], points: list[SfmPoint]) -> None:
    """Write cameras.bin / images.bin / points3D.bin in the COLMAP little-endian layout."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    intrinsics, observations, tracks = _colmap_records(cameras, points)

    chunks = [struct.pack("<Q", len(intrinsics))]
    for camera_id, camera in intrinsics.items():
        params = _params_from_camera(camera)
        chunks.append(struct.pack("<iiQQ", camera_id, CAMERA_MODEL_IDS[camera.model], camera.width, camera.height))
        chunks.append(struct.pack("<" + "d" * len(params), *params))
    (model_dir / "cameras.bin").write_bytes(b"".join(chunks))

    chunks = [struct.pack("<Q", len(cameras))]
    for camera in cameras:
        chunks.append(struct.pack("<idddddddi", camera.id, *camera.qvec, *camera.translation, camera.camera_id))
        chunks.append((camera.name or str(camera.id)).encode("utf-8") + b"\x00")
        obs = observations[camera.id]
        chunks.append(struct.pack("<Q", len(obs)))
        for x, y, pid in obs:
            chunks.append(struct.pack("<ddq", x, y, pid))
    (model_dir / "images.bin").write_bytes(b"".join(chunks))

    chunks = [struct.pack("<Q", len(points))]
    for point, track in zip(points, tracks):
        rgb = point.color if point.color is not None else (128, 128, 128)
        chunks.append(struct.pack("<QdddBBBd", point.id, *point.position, *rgb, point.reprojection_error))
        chunks.append(struct.pack("<Q", len(track)))
        for image_id, idx in track:
            chunks.append(struct.pack("<ii", image_id, idx))
    (model_dir / "points3D.bin").write_bytes(b"".join(chunks))


def filter_points(points: list[SfmPoint], selected_cameras: set[int], min_views: int = 3) -> list[SfmPoint]:
    """
    Keep points observed by at least `min_views` of the selected cameras, in order.

    Args:
        points: SfM points of the full reconstruction
        selected_cameras: Camera ids of the k-shot selection
        min_views: Minimum number of distinct selected cameras observing a point

    Returns:
        list: Points passing the visibility filter
    """
    if min_views < 1:
        raise InputError(f"min_views must be >= 1, got {min_views}")
    selected = set(selected_cameras)
    if not selected:
        return []
    return [p for p in points if len(p.view_ids & selected) >= min_views]


def project_sparse_depth(points: list[SfmPoint], camera: Camera) -> SparseDepthMap:
    """
    Sparse depth of the points observed in `camera`, at their observed pixels.

    Depth is the camera-space z of the point; samples behind the camera or
    outside the image are dropped. Weights are reciprocal reprojection errors
    normalized so the largest is 1; zero-error points get weight 1.
    """
    pixels, depths, errors, ids = [], [], [], []
    for point in points:
        observed = next((xy for image_id, xy in point.track if image_id == camera.id), None)
        if observed is None:
            continue
        depth = float(camera.world_to_camera(point.position)[2])
        if not depth > 0:
            continue
        px, py = int(np.rint(observed[0])), int(np.rint(observed[1]))
        if not (0 <= px < camera.width and 0 <= py < camera.height):
            continue
        pixels.append((px, py))
        depths.append(depth)
        errors.append(float(point.reprojection_error))
        ids.append(point.id)

    errors = np.asarray(errors, dtype=np.float64)
    weights = np.ones_like(errors)
    positive = errors > 0
    if positive.any():
        inverse = 1.0 / errors[positive]
        weights[positive] = inverse / inverse.max()

    return SparseDepthMap(
        view_id=camera.id,
        pixels=np.asarray(pixels, dtype=np.int64).reshape(-1, 2),
        depths=np.asarray(depths, dtype=np.float64),
        weights=weights,
        point_ids=np.asarray(ids, dtype=np.int64),
    )


def load_image(path: Path | str) -> np.ndarray:
    """
    Read a PNG/JPEG as an H x W x 3 float image in [0, 1], scaled by its bit depth.

    16-bit grayscale keeps its full precision. Pillow has no 16-bit RGB mode, so a
    16-bit color PNG is decoded from the high byte of each channel (8-bit precision)
    and a warning is issued.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                data = np.asarray(img, dtype=np.float64) / 65535.0
                return np.repeat(data[..., None], 3, axis=2)
            if img.tile and ";16" in str(img.tile[0][3]):
                warnings.warn(f"{path}: 16-bit color image read at 8-bit precision", stacklevel=2)
            if mode != "RGB":
                img = img.convert("RGB")
            return np.asarray(img, dtype=np.float64) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise InputError(f"cannot read image {path}: {e}")


def save_image(path: Path | str, image: np.ndarray) -> None:
    """Write an RGB float image in [0, 1] as an 8-bit PNG."""
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)
