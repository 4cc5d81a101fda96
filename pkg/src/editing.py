"""
Instance-level editing of a lifted field: removal, rigid relocation,
recoloring, asset insertion and replacement.

Edits are copy-on-write; Gaussians outside the edited instance are carried
over bit-identical. Removal and insertion drop pixel alignment (sparse fields).
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .exporters.ply_exporter import read_ply
from .scene_core import GaussianField, PanopticSets, SegmentationField, quaternion_multiply
from .utils.exceptions import (ConfigurationException, InvalidTransformException,
                               MissingChannelException, UnknownInstanceException)
from .utils.logger import logger

EDIT_KINDS = ("remove", "relocate", "recolor", "replace")
RIGID_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EditOp:
    """One edit of an edit plan."""
    kind: str
    ins_id: int
    transform: Optional[np.ndarray] = None
    color: Optional[Tuple[float, float, float]] = None
    asset: Optional[str] = None

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise InvalidTransformException(f"Unknown edit kind '{self.kind}'. Supported: {list(EDIT_KINDS)}")
        if self.kind == "relocate" and self.transform is None:
            raise InvalidTransformException("relocate requires a transform")
        if self.kind == "recolor" and self.color is None:
            raise InvalidTransformException("recolor requires a color")
        if self.kind == "replace" and not self.asset:
            raise InvalidTransformException("replace requires an asset path")


def _members(seg: SegmentationField, ins_id: int) -> np.ndarray:
    members = seg.ins_sets.get(int(ins_id))
    if members is None or members.size == 0:
        raise UnknownInstanceException(f"Instance {ins_id} has no Gaussians")
    return members


def remove_instance(field: GaussianField, seg: SegmentationField, ins_id: int) -> GaussianField:
    """Drop the Gaussians of one instance; the result is sparse."""
    members = _members(seg, ins_id)
    keep = np.ones(field.count, dtype=bool)
    keep[members] = False
    logger.info(f"Removed instance {ins_id} ({members.size} Gaussian(s))")
    return field.select(keep)


def validate_rigid(transform: np.ndarray) -> np.ndarray:
    """
    Return the transform as a 4x4 float array.

    Raises:
        InvalidTransformException: Unless the rotation is orthonormal with det +1
    """
    t = np.asarray(transform, dtype=np.float64)
    if t.shape != (4, 4) or not np.all(np.isfinite(t)):
        raise InvalidTransformException(f"Transform must be a finite 4x4 matrix, got shape {t.shape}")
    rot = t[:3, :3]
    if (np.max(np.abs(rot @ rot.T - np.eye(3))) > RIGID_TOLERANCE
            or abs(np.linalg.det(rot) - 1.0) > RIGID_TOLERANCE
            or not np.allclose(t[3], [0.0, 0.0, 0.0, 1.0])):
        raise InvalidTransformException("Transform is not rigid")
    return t


def relocate_instance(field: GaussianField, seg: SegmentationField, ins_id: int,
                      transform: np.ndarray) -> GaussianField:
    """
    Apply a rigid transform to one instance: mu' = R mu + t, rot' = q(R) * rot.

    Scales, opacities and attributes are unchanged; the identity returns the field as is.
    """
    t = validate_rigid(transform)
    members = _members(seg, ins_id)
    if np.array_equal(t, np.eye(4)):
        return field

    rot = t[:3, :3]
    x, y, z, w = Rotation.from_matrix(rot).as_quat()
    q = np.array([w, x, y, z])

    means = np.array(field.means)
    rotations = np.array(field.rotations)
    means[members] = field.means[members] @ rot.T + t[:3, 3]
    rotations[members] = quaternion_multiply(np.broadcast_to(q, (members.size, 4)), field.rotations[members])
    logger.info(f"Relocated instance {ins_id} ({members.size} Gaussian(s))")
    return GaussianField(means, field.opacities, rotations, field.scales, field.attrs, field.dims)


def recolor_instance(field: GaussianField, seg: SegmentationField, ins_id: int,
                     rgb: Sequence[float]) -> GaussianField:
    """
    Set the RGB payload of one instance.

    Raises:
        MissingChannelException: If the field does not carry 3-channel colors
    """
    if field.attr_dim != 3:
        raise MissingChannelException(f"Recoloring needs RGB attributes, field has K={field.attr_dim}")
    members = _members(seg, ins_id)
    attrs = np.array(field.attrs)
    attrs[members] = np.asarray(rgb, dtype=np.float64).reshape(3)
    logger.info(f"Recolored instance {ins_id} to {tuple(float(c) for c in rgb)}")
    return field.with_attrs(attrs)


def insert_gaussians(field: GaussianField, asset: GaussianField) -> GaussianField:
    """Append an asset's Gaussians; the result is sparse."""
    if asset.attr_dim != field.attr_dim:
        raise MissingChannelException(
            f"Asset carries K={asset.attr_dim} attributes, field carries K={field.attr_dim}"
        )
    logger.info(f"Inserted {asset.count} Gaussian(s)")
    return GaussianField(
        np.concatenate([field.means, asset.means]),
        np.concatenate([field.opacities, asset.opacities]),
        np.concatenate([field.rotations, asset.rotations]),
        np.concatenate([field.scales, asset.scales]),
        np.concatenate([field.attrs, asset.attrs]),
        None,
    )


def _reindex(seg: SegmentationField, keep: np.ndarray) -> SegmentationField:
    """Segmentation of the field that keeps only the `keep` Gaussians."""
    new_index = np.cumsum(keep) - 1

    def remap(sets: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
        out = {}
        for key, members in sets.items():
            kept = members[keep[members]]
            if kept.size:
                out[key] = new_index[kept]
        return out

    text_set = None if seg.text_set is None else new_index[seg.text_set[keep[seg.text_set]]]
    return SegmentationField(remap(seg.sem_sets), remap(seg.ins_sets),
                             PanopticSets(remap(seg.pano.stuff), remap(seg.pano.things)),
                             text_set, seg.text_id)


def load_edit_plan(path: str) -> List[EditOp]:
    """
    Read a YAML list of edit operations.

    Raises:
        ConfigurationException: If the file is missing or not a list of mappings
    """
    try:
        with open(path, 'r') as f:
            entries = yaml.safe_load(f) or []
    except FileNotFoundError:
        raise ConfigurationException(f"Edit plan not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigurationException(f"Failed to parse edit plan: {str(e)}")
    if isinstance(entries, dict):
        entries = entries.get("edits", [])
    if not isinstance(entries, list) or not all(isinstance(e, dict) for e in entries):
        raise ConfigurationException("Edit plan must be a list of operations")

    ops = []
    for entry in entries:
        if "kind" not in entry or "ins_id" not in entry:
            raise ConfigurationException(f"Edit operation needs 'kind' and 'ins_id': {entry}")
        transform = entry.get("transform")
        color = entry.get("color")
        ops.append(EditOp(
            kind=str(entry["kind"]),
            ins_id=int(entry["ins_id"]),
            transform=None if transform is None else np.asarray(transform, dtype=np.float64),
            color=None if color is None else tuple(float(c) for c in color),
            asset=entry.get("asset"),
        ))
    logger.info(f"Loaded {len(ops)} edit operation(s) from {path}")
    return ops


def apply_edit_plan(field: GaussianField, seg: SegmentationField, ops: Sequence[EditOp],
                    asset_loader: Optional[Callable[[str], GaussianField]] = None
                    ) -> Tuple[GaussianField, SegmentationField]:
    """
    Apply edits in order, keeping the segmentation in step with the field.

    Args:
        field: Field to edit
        seg: Its segmentation
        ops: Edit operations
        asset_loader: Reads replacement assets (default: PLY reader)

    Returns:
        (edited field, segmentation of the edited field)
    """
    asset_loader = asset_loader or read_ply

    for op in ops:
        if op.kind in ("remove", "replace"):
            members = _members(seg, op.ins_id)
            keep = np.ones(field.count, dtype=bool)
            keep[members] = False
            field = remove_instance(field, seg, op.ins_id)
            seg = _reindex(seg, keep)
            if op.kind == "replace":
                field = insert_gaussians(field, asset_loader(op.asset))
        elif op.kind == "relocate":
            field = relocate_instance(field, seg, op.ins_id, op.transform)
        else:
            field = recolor_instance(field, seg, op.ins_id, op.color)
    return field, seg
