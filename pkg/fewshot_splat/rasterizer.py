"""
Tile-based differentiable rasterizer for splats: color and depth by
front-to-back alpha compositing, and the analytic backward pass.

Forward records everything the backward pass needs; tiles are composited
independently and in parallel, and their results are gathered in tile order
so output is identical for any thread count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fewshot_splat.config import default_threads
from fewshot_splat.errors import ContractError
from fewshot_splat.scene_io import Camera
from fewshot_splat.splats import SplatSet, sh_basis, SH_C1

ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
COV2D_FLOOR = 0.3
NEAR_PLANE = 0.01
EXTENT_SIGMAS = 3.0
DEFAULT_TILE = 16


@dataclass(eq=False)
class ProjectedSplats:
    """
    Screen-space view of the splats that survived culling (M of them).
    `index` maps back into the SplatSet; the remaining arrays are the
    intermediates reused by the backward pass.
    """
    index: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    extents: np.ndarray
    cam_points: np.ndarray = field(repr=False, default=None)
    cov3d: np.ndarray = field(repr=False, default=None)
    rotmats: np.ndarray = field(repr=False, default=None)
    scales: np.ndarray = field(repr=False, default=None)
    jacobians: np.ndarray = field(repr=False, default=None)
    directions: np.ndarray = field(repr=False, default=None)
    view_distance: np.ndarray = field(repr=False, default=None)
    color_unclamped: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.index)


@dataclass(eq=False)
class TileRecord:
    """Per-tile compositing state (K splats x P pixels) kept for the backward pass."""
    x0: int
    y0: int
    x1: int
    y1: int
    order: np.ndarray
    gaussian: np.ndarray
    raw_alpha: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    final_transmittance: np.ndarray


@dataclass(eq=False)
class RenderRecords:
    splats: SplatSet
    camera: Camera
    projected: ProjectedSplats
    tiles: list[TileRecord]
    background: np.ndarray
    threads: int


@dataclass(eq=False)
class RenderOutput:
    """Rendered color (H, W, 3), depth (H, W), final transmittance (H, W)."""
    color: np.ndarray
    depth: np.ndarray
    transmittance: np.ndarray
    records: RenderRecords | None = field(default=None, repr=False)

    @property
    def coverage(self) -> np.ndarray:
        """Accumulated alpha per pixel."""
        return 1.0 - self.transmittance


@dataclass(eq=False)
class SplatGradients:
    """Gradients for every SplatSet field plus the screen-space mean gradient."""
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    means2d: np.ndarray
    visible: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }


def quaternion_to_rotmat(quaternions: np.ndarray) -> np.ndarray:
    """Rotation matrices (N, 3, 3) from (N, 4) quaternions (w, x, y, z), normalized first."""
    q = quaternions / np.linalg.norm(quaternions, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
    ], axis=1)


def project(splats: SplatSet, camera: Camera) -> ProjectedSplats:
    """
    Cull and project splats: EWA 2D covariance with a 0.3 px^2 floor,
    centre depth, SH color along the view ray, and the 3-sigma screen extent.
    """
    cam_points = camera.world_to_camera(splats.positions)
    x, y, z = cam_points[:, 0], cam_points[:, 1], cam_points[:, 2]
    keep = z > NEAR_PLANE
    index = np.flatnonzero(keep)
    cam_points, x, y, z = cam_points[keep], x[keep], y[keep], z[keep]
    fx, fy = camera.fx, camera.fy

    rotmats = quaternion_to_rotmat(splats.rotations[keep]) if len(index) else np.zeros((0, 3, 3))
    scales = np.exp(splats.log_scales[keep])
    M = rotmats * scales[:, None, :]
    cov3d = M @ M.transpose(0, 2, 1)

    jacobians = np.zeros((len(index), 2, 3))
    jacobians[:, 0, 0] = fx / z
    jacobians[:, 0, 2] = -fx * x / (z * z)
    jacobians[:, 1, 1] = fy / z
    jacobians[:, 1, 2] = -fy * y / (z * z)
    T = jacobians @ camera.rotation
    cov2d = T @ cov3d @ T.transpose(0, 2, 1) + COV2D_FLOOR * np.eye(2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    means2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)
    extents = EXTENT_SIGMAS * np.sqrt(np.stack([a, c], axis=1))

    view = splats.positions[keep] - camera.center
    view_distance = np.linalg.norm(view, axis=1)
    directions = view / np.maximum(view_distance, 1e-12)[:, None]
    raw_color = np.einsum("nk,nkc->nc", sh_basis(directions), splats.sh[keep]) + 0.5
    colors = np.maximum(raw_color, 0.0)

    on_screen = (
        (det > 0)
        & (means2d[:, 0] + extents[:, 0] >= 0) & (means2d[:, 0] - extents[:, 0] <= camera.width - 1)
        & (means2d[:, 1] + extents[:, 1] >= 0) & (means2d[:, 1] - extents[:, 1] <= camera.height - 1)
    )
    return ProjectedSplats(
        index=index[on_screen],
        means2d=means2d[on_screen],
        cov2d=cov2d[on_screen],
        conics=conics[on_screen],
        depths=z[on_screen],
        colors=colors[on_screen],
        opacities=splats.opacities[keep][on_screen],
        extents=extents[on_screen],
        cam_points=cam_points[on_screen],
        cov3d=cov3d[on_screen],
        rotmats=rotmats[on_screen],
        scales=scales[on_screen],
        jacobians=jacobians[on_screen],
        directions=directions[on_screen],
        view_distance=view_distance[on_screen],
        color_unclamped=(raw_color > 0)[on_screen],
    )


def sort_and_bin(projected: ProjectedSplats, tile_size: int, width: int, height: int) -> list[np.ndarray]:
    """
    Depth-ordered splat lists per tile (row-major tile order).

    Splats are sorted front to back by centre depth (stable, so equal depths
    keep index order) and placed in every tile their 3-sigma box overlaps.

    Returns:
        list: For each tile, positions into `projected` in compositing order
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    count = len(projected)
    if count == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(tiles_x * tiles_y)]

    order = np.argsort(projected.depths, kind="stable")
    lo = projected.means2d[order] - projected.extents[order]
    hi = projected.means2d[order] + projected.extents[order]
    tx0 = np.clip(np.floor(lo[:, 0] / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(hi[:, 0] / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(lo[:, 1] / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(hi[:, 1] / tile_size), 0, tiles_y - 1).astype(np.int64)

    span_x = tx1 - tx0 + 1
    touched = span_x * (ty1 - ty0 + 1)
    owner = np.repeat(np.arange(count), touched)
    local = np.arange(touched.sum()) - np.repeat(np.cumsum(touched) - touched, touched)
    tile_ids = (ty0[owner] + local // span_x[owner]) * tiles_x + tx0[owner] + local % span_x[owner]

    # owner is already in depth order, a stable sort by tile keeps it
    by_tile = np.argsort(tile_ids, kind="stable")
    tile_ids, entries = tile_ids[by_tile], order[owner[by_tile]]
    bounds = np.searchsorted(tile_ids, np.arange(tiles_x * tiles_y + 1))
    return [entries[bounds[t]:bounds[t + 1]] for t in range(tiles_x * tiles_y)]


def _tile_pixels(record_or_bounds) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = record_or_bounds
    ys, xs = np.meshgrid(np.arange(y0, y1, dtype=np.float64), np.arange(x0, x1, dtype=np.float64), indexing="ij")
    return xs.ravel(), ys.ravel()


def _composite_tile(projected: ProjectedSplats, bounds, order: np.ndarray, background: np.ndarray):
    x0, y0, x1, y1 = bounds
    px, py = _tile_pixels(bounds)
    pixels = len(px)
    if len(order) == 0:
        color = np.broadcast_to(background, (pixels, 3)).copy()
        record = TileRecord(x0, y0, x1, y1, order, *(np.zeros((0, pixels)),) * 4, np.ones(pixels))
        return color, np.zeros(pixels), np.ones(pixels), record

    dx = px[None, :] - projected.means2d[order, 0][:, None]
    dy = py[None, :] - projected.means2d[order, 1][:, None]
    A, B, C = (projected.conics[order, i][:, None] for i in range(3))
    gaussian = np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
    raw_alpha = projected.opacities[order][:, None] * gaussian
    alpha = np.minimum(raw_alpha, ALPHA_MAX)

    # compositing stops before the splat that would push transmittance below the cutoff
    alpha = np.where(np.cumprod(1.0 - alpha, axis=0) >= TRANSMITTANCE_MIN, alpha, 0.0)
    after = np.cumprod(1.0 - alpha, axis=0)
    transmittance = np.vstack([np.ones((1, pixels)), after[:-1]])
    final = after[-1]

    weights = alpha * transmittance
    color = weights.T @ projected.colors[order] + final[:, None] * background[None, :]
    depth = weights.T @ projected.depths[order]
    record = TileRecord(x0, y0, x1, y1, order, gaussian, raw_alpha, alpha, transmittance, final)
    return color, depth, final, record


def _tile_bounds(width: int, height: int, tile_size: int) -> list[tuple[int, int, int, int]]:
    return [
        (x0, y0, min(x0 + tile_size, width), min(y0 + tile_size, height))
        for y0 in range(0, height, tile_size)
        for x0 in range(0, width, tile_size)
    ]


def render(splats: SplatSet, camera: Camera, background=(0.0, 0.0, 0.0),
           tile_size: int = DEFAULT_TILE, threads: int | None = None) -> RenderOutput:
    """
    Render color and depth of `splats` seen from `camera`.

    Args:
        splats: Scene to render (read only)
        camera: View to render
        background: RGB blended with the residual transmittance (color only)
        tile_size: Tile edge in pixels
        threads: Worker count for tile compositing (default from environment)

    Returns:
        RenderOutput: color, depth and transmittance images with backward records
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    width, height = camera.width, camera.height
    threads = threads or default_threads()
    projected = project(splats, camera)
    bins = sort_and_bin(projected, tile_size, width, height)
    bounds = _tile_bounds(width, height, tile_size)

    def run(job):
        tile_bounds, order = job
        return _composite_tile(projected, tile_bounds, order, background)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, zip(bounds, bins)))
    else:
        results = [run(job) for job in zip(bounds, bins)]

    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    transmittance = np.ones((height, width))
    records = []
    for (x0, y0, x1, y1), (tile_color, tile_depth, tile_final, record) in zip(bounds, results):
        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = tile_color.reshape(*shape, 3)
        depth[y0:y1, x0:x1] = tile_depth.reshape(shape)
        transmittance[y0:y1, x0:x1] = tile_final.reshape(shape)
        records.append(record)

    return RenderOutput(
        color=color,
        depth=depth,
        transmittance=transmittance,
        records=RenderRecords(splats=splats, camera=camera, projected=projected, tiles=records,
                              background=background, threads=threads),
    )


def _tile_backward(projected: ProjectedSplats, record: TileRecord, grad_color: np.ndarray,
                   grad_depth: np.ndarray, background: np.ndarray):
    order = record.order
    if len(order) == 0:
        return None
    px, py = _tile_pixels((record.x0, record.y0, record.x1, record.y1))
    g_color = grad_color[record.y0:record.y1, record.x0:record.x1].reshape(-1, 3)
    g_depth = grad_depth[record.y0:record.y1, record.x0:record.x1].reshape(-1)

    alpha, transmittance = record.alpha, record.transmittance
    weights = alpha * transmittance

    d_colors = weights @ g_color
    d_depths = weights @ g_depth

    # per splat/pixel: dL/d(contribution weight)
    shade = projected.colors[order] @ g_color.T + projected.depths[order][:, None] * g_depth[None, :]
    contribution = shade * weights
    behind = np.cumsum(contribution[::-1], axis=0)[::-1] - contribution
    behind = behind + (record.final_transmittance * (g_color @ background))[None, :]
    d_alpha = transmittance * shade - behind / (1.0 - alpha)
    d_alpha = np.where((alpha > 0) & (record.raw_alpha < ALPHA_MAX), d_alpha, 0.0)

    d_opacities = np.sum(d_alpha * record.gaussian, axis=1)
    d_power = d_alpha * record.raw_alpha

    dx = px[None, :] - projected.means2d[order, 0][:, None]
    dy = py[None, :] - projected.means2d[order, 1][:, None]
    A, B, C = (projected.conics[order, i][:, None] for i in range(3))
    d_means = np.stack([
        np.sum(d_power * (A * dx + B * dy), axis=1),
        np.sum(d_power * (B * dx + C * dy), axis=1),
    ], axis=1)
    d_conics = np.stack([
        np.sum(d_power * (-0.5 * dx * dx), axis=1),
        np.sum(d_power * (-dx * dy), axis=1),
        np.sum(d_power * (-0.5 * dy * dy), axis=1),
    ], axis=1)
    return order, d_colors, d_depths, d_opacities, d_means, d_conics


def _rotation_backward(quaternions: np.ndarray, d_rotmats: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. raw quaternions given dL/dR, through the normalization."""
    norm = np.linalg.norm(quaternions, axis=1, keepdims=True)
    q = quaternions / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = d_rotmats
    d_w = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    d_x = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
               + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    d_y = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
               - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    d_z = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
               + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    d_q = np.stack([d_w, d_x, d_y, d_z], axis=1)
    return (d_q - q * np.sum(q * d_q, axis=1, keepdims=True)) / norm


def render_backward(output: RenderOutput, grad_color: np.ndarray, grad_depth: np.ndarray) -> SplatGradients:
    """
    Exact gradients of sum(grad_color * color) + sum(grad_depth * depth)
    with respect to every splat parameter, including the depth path through
    centre depths and through the shared alphas and transmittances.
    """
    records = output.records
    if records is None:
        raise ContractError("render output carries no backward records")
    grad_color = np.asarray(grad_color, dtype=np.float64)
    grad_depth = np.asarray(grad_depth, dtype=np.float64)
    if grad_color.shape != output.color.shape or grad_depth.shape != output.depth.shape:
        raise ContractError(
            f"gradient shapes {grad_color.shape}, {grad_depth.shape} do not match render "
            f"{output.color.shape}, {output.depth.shape}"
        )

    splats, camera, projected = records.splats, records.camera, records.projected
    count, visible_count = splats.count, len(projected)

    def run(record):
        return _tile_backward(projected, record, grad_color, grad_depth, records.background)

    if records.threads > 1 and len(records.tiles) > 1:
        with ThreadPoolExecutor(max_workers=records.threads) as pool:
            partials = list(pool.map(run, records.tiles))
    else:
        partials = [run(record) for record in records.tiles]

    d_colors = np.zeros((visible_count, 3))
    d_depths = np.zeros(visible_count)
    d_opacities = np.zeros(visible_count)
    d_means = np.zeros((visible_count, 2))
    d_conics = np.zeros((visible_count, 3))
    # gathered in tile order so sums do not depend on scheduling
    for partial in partials:
        if partial is None:
            continue
        order, pc, pd, po, pm, pq = partial
        np.add.at(d_colors, order, pc)
        np.add.at(d_depths, order, pd)
        np.add.at(d_opacities, order, po)
        np.add.at(d_means, order, pm)
        np.add.at(d_conics, order, pq)

    fx, fy = camera.fx, camera.fy
    x, y, z = projected.cam_points[:, 0], projected.cam_points[:, 1], projected.cam_points[:, 2]

    # conic -> 2D covariance
    Q = np.zeros((visible_count, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (
        projected.conics[:, 0], projected.conics[:, 1], projected.conics[:, 1], projected.conics[:, 2])
    dQ = np.zeros_like(Q)
    dQ[:, 0, 0], dQ[:, 1, 1] = d_conics[:, 0], d_conics[:, 2]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * d_conics[:, 1]
    d_cov2d = -Q @ dQ @ Q

    # 2D covariance -> 3D covariance and the projection Jacobian
    W = camera.rotation
    T = projected.jacobians @ W
    d_cov3d = T.transpose(0, 2, 1) @ d_cov2d @ T
    d_T = 2.0 * d_cov2d @ T @ projected.cov3d
    d_J = d_T @ W.T

    d_cam = np.zeros((visible_count, 3))
    d_cam[:, 0] = d_means[:, 0] * fx / z + d_J[:, 0, 2] * (-fx / (z * z))
    d_cam[:, 1] = d_means[:, 1] * fy / z + d_J[:, 1, 2] * (-fy / (z * z))
    d_cam[:, 2] = (
        d_means[:, 0] * (-fx * x / (z * z)) + d_means[:, 1] * (-fy * y / (z * z))
        + d_J[:, 0, 0] * (-fx / (z * z)) + d_J[:, 0, 2] * (2 * fx * x / z ** 3)
        + d_J[:, 1, 1] * (-fy / (z * z)) + d_J[:, 1, 2] * (2 * fy * y / z ** 3)
        + d_depths
    )
    d_positions_visible = d_cam @ W

    # color -> SH coefficients and view direction
    d_raw_color = d_colors * projected.color_unclamped
    basis = sh_basis(projected.directions)
    d_sh_visible = basis[:, :, None] * d_raw_color[:, None, :]
    sh = splats.sh[projected.index]
    d_dir = np.stack([
        -SH_C1 * np.sum(sh[:, 3, :] * d_raw_color, axis=1),
        -SH_C1 * np.sum(sh[:, 1, :] * d_raw_color, axis=1),
        SH_C1 * np.sum(sh[:, 2, :] * d_raw_color, axis=1),
    ], axis=1)
    dirs = projected.directions
    d_view = (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / projected.view_distance[:, None]
    d_positions_visible += d_view

    # 3D covariance -> scale and rotation
    R, s = projected.rotmats, projected.scales
    M = R * s[:, None, :]
    d_M = 2.0 * d_cov3d @ M
    d_s = np.sum(R * d_M, axis=1)
    d_R = d_M * s[:, None, :]
    d_rot_visible = _rotation_backward(splats.rotations[projected.index], d_R)

    opac = projected.opacities
    gradients = SplatGradients(
        positions=np.zeros((count, 3)),
        log_scales=np.zeros((count, 3)),
        rotations=np.zeros((count, 4)),
        opacity_logits=np.zeros(count),
        sh=np.zeros((count, 4, 3)),
        means2d=np.zeros((count, 2)),
        visible=np.zeros(count, dtype=bool),
    )
    idx = projected.index
    gradients.positions[idx] = d_positions_visible
    gradients.log_scales[idx] = d_s * s
    gradients.rotations[idx] = d_rot_visible
    gradients.opacity_logits[idx] = d_opacities * opac * (1.0 - opac)
    gradients.sh[idx] = d_sh_visible
    gradients.means2d[idx] = d_means
    gradients.visible[idx] = True
    return gradients
