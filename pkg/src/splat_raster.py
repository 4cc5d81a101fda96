"""
Tile-based software rasterizer for 3D Gaussians with arbitrary K-channel payloads.

Splats are projected with the first-order (EWA) pinhole Jacobian, sorted by
ascending camera depth (ties by source index) and composited front to back:

    out = sum_i attr_i * a_i * T_i,  T_i = prod_{j<i} (1 - a_j),
    a_i = min(opacity_cap, opacity_i * exp(-0.5 d^T cov2d^-1 d))

A splat is composited only while T_i >= transmittance_min. Pixel (i, j) is
sampled at continuous image coordinate (x=j, y=i).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .config_parser import RasterConfig
from .scene_core import BACKGROUND, CameraModel, GaussianField
from .utils.exceptions import DimensionMismatchException, NonFiniteException, RasterException
from .utils.logger import logger


@dataclass(frozen=True)
class ProjectedSplat:
    """One Gaussian projected into an image."""
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float
    source_index: int


@dataclass
class ProjectedSplats:
    """Projected splats of one view as parallel arrays, already depth-sorted."""
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray
    source_index: np.ndarray

    def __len__(self) -> int:
        return self.depths.shape[0]

    def as_list(self) -> List[ProjectedSplat]:
        return [
            ProjectedSplat(self.means2d[k], self.cov2d[k], float(self.depths[k]),
                           float(self.radii[k]), int(self.source_index[k]))
            for k in range(len(self))
        ]


@dataclass(frozen=True)
class RenderOutput:
    """Attribute image (K,H,W), accumulated alpha (H,W) and alpha-normalized depth (H,W)."""
    attr_image: np.ndarray
    alpha_image: np.ndarray
    depth_image: np.ndarray


def project_splats(field: GaussianField, cam: CameraModel, size: Tuple[int, int],
                   config: Optional[RasterConfig] = None) -> ProjectedSplats:
    """
    Project every Gaussian in front of the near plane and sort by (depth, source index).

    Raises:
        RasterException: If a projected covariance is not positive definite
    """
    config = config or RasterConfig()
    height, width = size
    w2c = cam.world_to_camera()
    rot, trans = w2c[:3, :3], w2c[:3, 3]

    p_cam = field.means @ rot.T + trans
    visible = np.flatnonzero(p_cam[:, 2] > config.near_plane)
    p_cam = p_cam[visible]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    k = cam.pixel_intrinsics(height, width)
    fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
    means2d = np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)

    jac = np.zeros((visible.size, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    cov_cam = rot @ field.covariances()[visible] @ rot.T
    cov2d = jac @ cov_cam @ np.transpose(jac, (0, 2, 1))
    cov2d[:, 0, 0] += config.dilation
    cov2d[:, 1, 1] += config.dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(~(det > 0)) or np.any(~(a > 0)):
        bad = visible[np.flatnonzero(~((det > 0) & (a > 0)))[0]]
        raise RasterException(f"Projected covariance of Gaussian {int(bad)} is not positive definite")
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    opacities = np.minimum(config.opacity_cap, field.opacities[visible])
    # extent beyond which a splat's alpha is guaranteed below cull_epsilon
    energy = np.sqrt(2.0 * np.log(np.maximum(opacities / config.cull_epsilon, 1.0)))
    radii = np.maximum(config.cull_sigma, energy) * np.sqrt(lam_max)

    on_screen = ((means2d[:, 0] + radii >= 0) & (means2d[:, 0] - radii <= width - 1)
                 & (means2d[:, 1] + radii >= 0) & (means2d[:, 1] - radii <= height - 1))
    keep = np.flatnonzero(on_screen)
    order = keep[np.lexsort((visible[keep], z[keep]))]

    return ProjectedSplats(
        means2d=means2d[order], cov2d=cov2d[order], conics=conics[order], depths=z[order],
        radii=radii[order], opacities=field.opacities[visible][order],
        source_index=visible[order],
    )


def project(field: GaussianField, cam: CameraModel, size: Tuple[int, int],
            config: Optional[RasterConfig] = None) -> List[ProjectedSplat]:
    """Projected splats as a depth-sorted list; culled Gaussians are omitted."""
    return project_splats(field, cam, size, config).as_list()


def _composite(splats: ProjectedSplats, sel: np.ndarray, pixels: np.ndarray,
               attrs: np.ndarray, config: RasterConfig):
    """Blend the selected (sorted) splats over a block of pixel coordinates (P, 2)."""
    if sel.size == 0:
        n_pix = pixels.shape[0]
        return np.zeros((n_pix, attrs.shape[1])), np.zeros(n_pix), np.zeros(n_pix)
    delta = pixels[None, :, :] - splats.means2d[sel][:, None, :]
    con = splats.conics[sel]
    power = -0.5 * (con[:, 0:1] * delta[..., 0] ** 2
                    + 2.0 * con[:, 1:2] * delta[..., 0] * delta[..., 1]
                    + con[:, 2:3] * delta[..., 1] ** 2)
    alpha = np.minimum(config.opacity_cap, splats.opacities[sel][:, None] * np.exp(power))

    transmittance = np.cumprod(1.0 - alpha, axis=0)
    transmittance = np.concatenate([np.ones((1, alpha.shape[1])), transmittance[:-1]], axis=0)
    weights = np.where(transmittance >= config.transmittance_min, alpha * transmittance, 0.0)

    src = splats.source_index[sel]
    return weights.T @ attrs[src], weights.sum(axis=0), weights.T @ splats.depths[sel]


def _render_attrs(field: GaussianField, attrs: np.ndarray, cam: CameraModel,
                  size: Tuple[int, int], config: RasterConfig, workers: Optional[int]) -> RenderOutput:
    height, width = size
    if height <= 0 or width <= 0:
        raise DimensionMismatchException(f"Image size must be positive, got {size}")
    k_dim = attrs.shape[1]
    if k_dim > config.attr_warn_dim:
        logger.warning(f"Rasterizing {k_dim} attribute channels (above {config.attr_warn_dim})")

    splats = project_splats(field, cam, size, config)
    logger.debug(f"Projected {len(splats)}/{field.count} Gaussians into {height}x{width}")

    ts = config.tile_size
    tiles = [(ty, tx) for ty in range(0, height, ts) for tx in range(0, width, ts)]
    lo = splats.means2d - splats.radii[:, None]
    hi = splats.means2d + splats.radii[:, None]

    def run_tile(tile):
        ty, tx = tile
        y1, x1 = min(ty + ts, height), min(tx + ts, width)
        sel = np.flatnonzero((hi[:, 0] >= tx) & (lo[:, 0] <= x1 - 1)
                             & (hi[:, 1] >= ty) & (lo[:, 1] <= y1 - 1))
        ys, xs = np.meshgrid(np.arange(ty, y1), np.arange(tx, x1), indexing="ij")
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        return _composite(splats, sel, pixels, attrs, config)

    n_workers = workers or config.workers
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(t) for t in tiles]

    attr_image = np.zeros((k_dim, height, width))
    alpha_image = np.zeros((height, width))
    depth_acc = np.zeros((height, width))
    for (ty, tx), (attr_t, alpha_t, depth_t) in zip(tiles, results):
        y1, x1 = min(ty + ts, height), min(tx + ts, width)
        shape = (y1 - ty, x1 - tx)
        attr_image[:, ty:y1, tx:x1] = attr_t.T.reshape((k_dim,) + shape)
        alpha_image[ty:y1, tx:x1] = alpha_t.reshape(shape)
        depth_acc[ty:y1, tx:x1] = depth_t.reshape(shape)

    depth_image = depth_acc / np.maximum(alpha_image, 1e-8)
    return RenderOutput(attr_image, alpha_image, depth_image)


def render(field: GaussianField, cam: CameraModel, size: Tuple[int, int],
           config: Optional[RasterConfig] = None, workers: Optional[int] = None) -> RenderOutput:
    """
    Rasterize the field's own attribute payload into one camera.

    Args:
        field: Dense or sparse Gaussian field
        cam: Target camera
        size: (H, W) of the output
        config: Rasterizer constants
        workers: Tile worker threads (default: config.workers)

    Returns:
        RenderOutput with K x H x W attributes
    """
    return _render_attrs(field, field.attrs, cam, size, config or RasterConfig(), workers)


def render_semantic(field: GaussianField, attrs: np.ndarray, cam: CameraModel,
                    size: Tuple[int, int], config: Optional[RasterConfig] = None,
                    workers: Optional[int] = None) -> RenderOutput:
    """
    Rasterize a per-Gaussian semantic payload in place of the field's colors.

    Raises:
        DimensionMismatchException: If attrs does not hold one row per Gaussian
        RasterException: If attribute values fall outside [0, 1]
    """
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim != 2 or attrs.shape[0] != field.count or attrs.shape[1] < 1:
        raise DimensionMismatchException(
            f"Semantic attributes must be ({field.count}, K), got {attrs.shape}"
        )
    if np.any(np.isnan(attrs)):
        raise NonFiniteException("Semantic attributes contain NaN")
    if attrs.size and (attrs.min() < 0.0 or attrs.max() > 1.0):
        raise RasterException("Semantic attributes must lie in [0, 1]")
    return _render_attrs(field, attrs, cam, size, config or RasterConfig(), workers)


def render_onehot_ids(field: GaussianField, ids: np.ndarray, cam: CameraModel,
                      size: Tuple[int, int], config: Optional[RasterConfig] = None) -> np.ndarray:
    """
    Render per-Gaussian integer ids as one-hot channels and take the per-pixel argmax.

    Gaussians labeled BACKGROUND feed an explicit background channel, so they
    still occlude. Pixels won by that channel, or with no coverage, are BACKGROUND.

    Returns:
        (H, W) int32 id map
    """
    ids = np.asarray(ids).reshape(-1)
    if ids.shape[0] != field.count:
        raise DimensionMismatchException(f"Expected {field.count} ids, got {ids.shape[0]}")
    labels = np.unique(ids[ids != BACKGROUND])
    channel = np.full(ids.shape[0], labels.size, dtype=np.int64)
    channel[ids != BACKGROUND] = np.searchsorted(labels, ids[ids != BACKGROUND])
    onehot = np.zeros((ids.shape[0], labels.size + 1))
    onehot[np.arange(ids.shape[0]), channel] = 1.0

    out = render_semantic(field, onehot, cam, size, config)
    winner = np.argmax(out.attr_image, axis=0)
    covered = np.max(out.attr_image, axis=0) > 0.0
    result = np.full(winner.shape, BACKGROUND, dtype=np.int32)
    labeled = covered & (winner < labels.size)
    result[labeled] = labels[winner[labeled]]
    return result
