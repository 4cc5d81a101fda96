"""
PNG exporter for id maps, previews, colors, depth and overlap matrices.
"""

import numpy as np
from PIL import Image

from .base_exporter import BaseExporter
from ..scene_core import BACKGROUND
from ..utils.exceptions import DimensionMismatchException
from ..utils.logger import logger

# Depth PNGs store millimeters in 16 bits.
DEPTH_SCALE = 1000.0
PALETTE_SEED = 0


class PNGExporter(BaseExporter):
    """Writes a 2-D uint8/uint16 or H x W x 3 uint8 array as PNG."""

    def get_format(self) -> str:
        """Return PNG format name."""
        return "png"

    def write(self, array: np.ndarray) -> None:
        array = np.ascontiguousarray(array)
        if array.dtype not in (np.uint8, np.uint16):
            raise DimensionMismatchException(f"PNG arrays must be uint8 or uint16, got {array.dtype}")
        Image.fromarray(array).save(self.temp_path, format="PNG")


def save_id_map(ids: np.ndarray, path: str) -> str:
    """16-bit id map; stored value = id + 1, so BACKGROUND is 0."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionMismatchException(f"Id maps must be H x W, got {ids.shape}")
    if ids.max(initial=0) >= np.iinfo(np.uint16).max:
        raise DimensionMismatchException(f"Id {int(ids.max())} does not fit a 16-bit PNG")
    return PNGExporter(path).export((ids + 1).astype(np.uint16))


def read_id_map(path: str) -> np.ndarray:
    """Inverse of save_id_map."""
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64).astype(np.int32) - 1


def palette(count: int) -> np.ndarray:
    """Deterministic RGB palette for ids 0..count-1."""
    rng = np.random.default_rng(PALETTE_SEED)
    return rng.integers(40, 256, size=(max(count, 1), 3), dtype=np.int64).astype(np.uint8)


def save_palette_preview(ids: np.ndarray, path: str) -> str:
    """Palette-colored preview of an id map; BACKGROUND is black."""
    ids = np.asarray(ids, dtype=np.int64)
    colors = palette(int(ids.max(initial=0)) + 1)
    out = np.zeros(ids.shape + (3,), dtype=np.uint8)
    labeled = ids != BACKGROUND
    out[labeled] = colors[ids[labeled]]
    return PNGExporter(path).export(out)


def save_rgb(image: np.ndarray, path: str) -> str:
    """Save a 3 x H x W image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionMismatchException(f"RGB images must be 3 x H x W, got {image.shape}")
    out = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return PNGExporter(path).export(np.transpose(out, (1, 2, 0)))


def save_depth(depth: np.ndarray, path: str) -> str:
    """16-bit depth PNG in millimeters; invalid depth is 0."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    scaled = np.where(valid, np.round(depth * DEPTH_SCALE), 0.0)
    clipped = int(np.count_nonzero(scaled > np.iinfo(np.uint16).max))
    if clipped:
        logger.warning(f"{clipped} depth value(s) exceed the 16-bit range and were clipped")
    return PNGExporter(path).export(np.clip(scaled, 0, np.iinfo(np.uint16).max).astype(np.uint16))


def save_matrix_image(matrix: np.ndarray, path: str) -> str:
    """Grayscale image of a matrix with values in [0, 1]."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return PNGExporter(path).export(np.round(np.clip(matrix, 0.0, 1.0) * 255.0).astype(np.uint8))
