"""
PLY exporter using the common 3D Gaussian splatting vertex layout.
"""

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.special import expit, logit

from .base_exporter import BaseExporter
from ..scene_core import GaussianField
from ..utils.exceptions import BundleFormatException, MissingChannelException
from ..utils.logger import logger

# Zeroth-order spherical harmonic constant; f_dc = (rgb - 0.5) / SH_C0.
SH_C0 = 0.28209479177387814

# Keeps logit(opacity) finite for fully opaque or transparent Gaussians.
OPACITY_EPS = 1e-7

VERTEX_DTYPE = [
    ('x', 'f4'), ('y', 'f4'), ('z', 'f4'),
    ('nx', 'f4'), ('ny', 'f4'), ('nz', 'f4'),
    ('f_dc_0', 'f4'), ('f_dc_1', 'f4'), ('f_dc_2', 'f4'),
    ('opacity', 'f4'),
    ('scale_0', 'f4'), ('scale_1', 'f4'), ('scale_2', 'f4'),
    ('rot_0', 'f4'), ('rot_1', 'f4'), ('rot_2', 'f4'), ('rot_3', 'f4'),
]


class PLYExporter(BaseExporter):
    """Binary little-endian PLY writer for RGB Gaussian fields."""

    def get_format(self) -> str:
        """Return PLY format name."""
        return "ply"

    def write(self, field: GaussianField) -> None:
        """
        Write one vertex per Gaussian.

        Raises:
            MissingChannelException: If the field does not carry RGB attributes
        """
        if field.attr_dim != 3:
            raise MissingChannelException(f"PLY export needs RGB attributes, field has K={field.attr_dim}")

        vertices = np.zeros(field.count, dtype=VERTEX_DTYPE)
        for axis, name in enumerate("xyz"):
            vertices[name] = field.means[:, axis]
        for c in range(3):
            vertices[f"f_dc_{c}"] = (field.attrs[:, c] - 0.5) / SH_C0
            vertices[f"scale_{c}"] = np.log(field.scales[:, c])
        for c in range(4):
            vertices[f"rot_{c}"] = field.rotations[:, c]
        vertices["opacity"] = logit(np.clip(field.opacities, OPACITY_EPS, 1.0 - OPACITY_EPS))

        PlyData([PlyElement.describe(vertices, 'vertex')], text=False,
                byte_order='<').write(self.temp_path)
        logger.debug(f"Packed {field.count} Gaussian(s) into PLY vertices")


def export_ply(field: GaussianField, path: str) -> str:
    """Write a field as a 3DGS-compatible PLY file (atomic)."""
    return PLYExporter(path).export(field)


def read_ply(path: str) -> GaussianField:
    """
    Read a 3DGS-layout PLY file back into a sparse GaussianField.

    Raises:
        BundleFormatException: If the file lacks the vertex properties
    """
    try:
        vertices = PlyData.read(path)['vertex']
    except (OSError, KeyError, ValueError) as e:
        raise BundleFormatException("invalid_bundle", f"Failed to read PLY file {path}: {str(e)}")

    names = {p.name for p in vertices.properties}
    missing = [name for name, _ in VERTEX_DTYPE if not name.startswith('n') and name not in names]
    if missing:
        raise BundleFormatException("invalid_bundle", f"PLY file {path} lacks properties {missing}")

    def column(name):
        return np.asarray(vertices[name], dtype=np.float64)

    means = np.stack([column(n) for n in "xyz"], axis=1)
    rgb = np.stack([column(f"f_dc_{c}") * SH_C0 + 0.5 for c in range(3)], axis=1)
    scales = np.exp(np.stack([column(f"scale_{c}") for c in range(3)], axis=1))
    rotations = np.stack([column(f"rot_{c}") for c in range(4)], axis=1)
    rotations = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = expit(column("opacity"))
    logger.info(f"Read {means.shape[0]} Gaussian(s) from {path}")
    return GaussianField(means, opacities, rotations, scales, rgb, None)
