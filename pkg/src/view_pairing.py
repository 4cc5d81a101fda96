"""
Overlap-IoU between depth frames and IoU-banded pair sampling.

Frame 1 is unprojected with its depth and camera, reprojected into frame 2 and
compared against frame 2's depth at the nearest pixel. The symmetric overlap is
the mean of both directed ratios.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config_parser import PairingConfig
from .scene_core import CameraModel
from .utils.exceptions import DimensionMismatchException
from .utils.logger import logger


@dataclass(frozen=True)
class Frame:
    """A depth map with its camera."""
    frame_id: str
    depth: np.ndarray
    cam: CameraModel


@dataclass(frozen=True)
class OverlapMatrix:
    """Symmetric F x F overlap IoUs."""
    frame_ids: Tuple[str, ...]
    iou: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.iou, index=list(self.frame_ids), columns=list(self.frame_ids))


def unproject(depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """
    World points of every pixel (H x W x 3); pixels without a finite positive depth are NaN.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionMismatchException(f"Depth must be H x W, got {depth.shape}")
    height, width = depth.shape
    k_inv = np.linalg.inv(cam.pixel_intrinsics(height, width))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pixels = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3).astype(np.float64)
    valid = (np.isfinite(depth) & (depth > 0)).reshape(-1)
    cam_pts = (pixels @ k_inv.T) * np.where(valid, depth.reshape(-1), np.nan)[:, None]
    rot, trans = cam.pose_c2w[:3, :3], cam.pose_c2w[:3, 3]
    return (cam_pts @ rot.T + trans).reshape(height, width, 3)


def reproject(points: np.ndarray, cam: CameraModel, size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Continuous pixel coordinates (x, y) and camera depth of world points.

    Points at or behind the camera center get NaN pixel coordinates.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    height, width = size
    w2c = cam.world_to_camera()
    p_cam = points @ w2c[:3, :3].T + w2c[:3, 3]
    depth = p_cam[:, 2]
    k = cam.pixel_intrinsics(height, width)
    safe = np.where(depth > 0, depth, np.nan)
    pixels = np.stack([k[0, 0] * p_cam[:, 0] / safe + k[0, 2],
                       k[1, 1] * p_cam[:, 1] / safe + k[1, 2]], axis=1)
    return pixels, depth


def nearest_pixel_inside(pixels: np.ndarray, depth: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Mask of points in front of the camera whose nearest pixel lies inside the frame."""
    height, width = size
    x, y = pixels[:, 0], pixels[:, 1]
    with np.errstate(invalid="ignore"):
        return ((depth > 0) & np.isfinite(x) & np.isfinite(y)
                & (x >= -0.5) & (x < width - 0.5) & (y >= -0.5) & (y < height - 0.5))


def directed_iou(d1: np.ndarray, cam1: CameraModel, d2: np.ndarray, cam2: CameraModel,
                 tau_d: float = 0.1) -> float:
    """
    Share of frame 1's valid depths that reproject consistently into frame 2.

    A pixel is consistent when it lands inside frame 2, in front of its camera,
    and within tau_d of frame 2's depth at the nearest pixel.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    points = unproject(d1, cam1).reshape(-1, 3)
    source = np.flatnonzero(np.all(np.isfinite(points), axis=1))
    if source.size == 0:
        logger.warning("Source frame has no valid depth; directed IoU reported as 0")
        return 0.0
    height, width = d2.shape
    pixels, depth = reproject(points[source], cam2, (height, width))
    inside = np.flatnonzero(nearest_pixel_inside(pixels, depth, (height, width)))
    col = np.floor(pixels[inside, 0] + 0.5).astype(np.int64)
    row = np.floor(pixels[inside, 1] + 0.5).astype(np.int64)
    target = d2[row, col]
    with np.errstate(invalid="ignore"):
        consistent = np.isfinite(target) & (target > 0) & (np.abs(depth[inside] - target) < tau_d)
    return float(np.count_nonzero(consistent) / source.size)


def overlap_iou(frame1: Frame, frame2: Frame, tau_d: float = 0.1) -> float:
    """Mean of the two directed IoUs; symmetric in its arguments."""
    a = directed_iou(frame1.depth, frame1.cam, frame2.depth, frame2.cam, tau_d)
    b = directed_iou(frame2.depth, frame2.cam, frame1.depth, frame1.cam, tau_d)
    return 0.5 * (a + b)


def overlap_matrix(frames: Sequence[Frame], config: Optional[PairingConfig] = None,
                   workers: int = 1) -> OverlapMatrix:
    """
    Full F x F overlap matrix; the diagonal is each frame's self-overlap.

    Args:
        frames: Frames with depth and camera
        config: Depth tolerance
        workers: Thread pool size for the pairwise computations
    """
    config = config or PairingConfig()
    n = len(frames)
    pairs = [(a, b) for a in range(n) for b in range(a, n)]

    def run(pair):
        a, b = pair
        return overlap_iou(frames[a], frames[b], config.depth_tolerance)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run, pairs))
    else:
        values = [run(p) for p in pairs]

    iou = np.zeros((n, n))
    for (a, b), value in zip(pairs, values):
        iou[a, b] = iou[b, a] = value
        logger.debug(f"Overlap {frames[a].frame_id} / {frames[b].frame_id}: {value:.4f}")
    logger.info(f"Computed overlap matrix for {n} frame(s)")
    return OverlapMatrix(tuple(f.frame_id for f in frames), iou)


def sample_pairs(matrix: OverlapMatrix, lo: float = 0.3, hi: float = 0.8, count: int = 1,
                 seed: int = 0) -> List[Tuple[str, str]]:
    """
    Sample distinct frame pairs with lo <= IoU <= hi, uniformly without replacement.

    Returns fewer than count pairs when the band is small, and an empty list
    (with a warning) when it is empty.
    """
    if not lo < hi:
        raise ValueError(f"Band must satisfy lo < hi, got [{lo}, {hi}]")
    rows, cols = np.triu_indices(len(matrix.frame_ids), k=1)
    values = matrix.iou[rows, cols]
    band = np.flatnonzero((values >= lo) & (values <= hi))
    if band.size == 0:
        if count > 0:
            logger.warning(f"No frame pairs with IoU in [{lo}, {hi}]")
        return []
    rng = np.random.default_rng(seed)
    chosen = rng.choice(band, size=min(count, band.size), replace=False)
    logger.info(f"Sampled {chosen.size} of {band.size} in-band pair(s)")
    return [(matrix.frame_ids[rows[k]], matrix.frame_ids[cols[k]]) for k in chosen]
