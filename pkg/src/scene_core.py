"""
Domain types shared by every engine module.

A GaussianField stores one primitive per pixel per view (pixel alignment):
primitive (v, i, j) lives at flat index v*H*W + i*W + j. Fields produced by
editing may drop that correspondence and are then flagged sparse.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .utils.exceptions import BundleFormatException, DimensionMismatchException
from .utils.logger import logger

# Label value for pixels and Gaussians carrying no class or instance.
BACKGROUND = -1

# Row layout of the packed Gaussian tensor: mu3, alpha1, rot4 (w,x,y,z), scale3, attrK
GAUSSIAN_FIXED_COLUMNS = 11

ROTATION_TOLERANCE = 1e-6
# Quaternion norm drift below this is float noise and is renormalized silently.
QUAT_DRIFT = float(np.finfo(np.float32).eps)
MAX_REPORTED_PRIMITIVES = 20


def _frozen(array, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GaussianPrimitive:
    """A single Gaussian: position, opacity, rotation (w,x,y,z), scale and attribute payload."""
    mu: np.ndarray
    alpha: float
    rot: np.ndarray
    scale: np.ndarray
    attr: np.ndarray


@dataclass(frozen=True)
class GaussianField:
    """Structure-of-arrays store of Gaussian primitives."""
    means: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    attrs: np.ndarray
    dims: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        means = _frozen(self.means).reshape(-1, 3)
        n = means.shape[0]
        opacities = _frozen(self.opacities).reshape(n)
        rotations = _frozen(self.rotations).reshape(n, 4)
        scales = _frozen(self.scales).reshape(n, 3)
        attrs = _frozen(self.attrs)
        if attrs.ndim == 1:
            attrs = _frozen(attrs.reshape(n, -1))
        if attrs.shape[0] != n or attrs.shape[1] < 1:
            raise DimensionMismatchException(
                f"Attribute payload has shape {attrs.shape}, expected ({n}, K>=1)"
            )
        if self.dims is not None:
            dims = tuple(int(d) for d in self.dims)
            if len(dims) != 3 or int(np.prod(dims)) != n:
                raise DimensionMismatchException(
                    f"Field dims {dims} imply {int(np.prod(dims))} primitives, got {n}"
                )
            object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "opacities", opacities)
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "attrs", attrs)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def attr_dim(self) -> int:
        return self.attrs.shape[1]

    @property
    def is_sparse(self) -> bool:
        return self.dims is None

    def flat_index(self, v: int, i: int, j: int) -> int:
        """Flat primitive index of pixel (i, j) in view v."""
        if self.dims is None:
            raise DimensionMismatchException("Sparse fields have no pixel indexing")
        _, h, w = self.dims
        return (v * h + i) * w + j

    def pixel_index(self, flat: int) -> Tuple[int, int, int]:
        """Inverse of flat_index."""
        if self.dims is None:
            raise DimensionMismatchException("Sparse fields have no pixel indexing")
        _, h, w = self.dims
        v, rest = divmod(int(flat), h * w)
        i, j = divmod(rest, w)
        return v, i, j

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=self.means[index],
            alpha=float(self.opacities[index]),
            rot=self.rotations[index],
            scale=self.scales[index],
            attr=self.attrs[index],
        )

    def with_attrs(self, attrs: np.ndarray) -> "GaussianField":
        """Same geometry with a different attribute payload."""
        return GaussianField(self.means, self.opacities, self.rotations, self.scales,
                             np.asarray(attrs).reshape(self.count, -1), self.dims)

    def select(self, keep: np.ndarray) -> "GaussianField":
        """Keep the primitives where `keep` is true; the result is sparse."""
        keep = np.asarray(keep, dtype=bool)
        return GaussianField(self.means[keep], self.opacities[keep], self.rotations[keep],
                             self.scales[keep], self.attrs[keep], None)

    def covariances(self) -> np.ndarray:
        """World-space covariances R diag(s^2) R^T, shape (N, 3, 3)."""
        rot = quaternion_to_matrix(self.rotations)
        scaled = rot * self.scales[:, None, :]
        return scaled @ np.transpose(scaled, (0, 2, 1))

    def to_tensor(self) -> np.ndarray:
        """Pack into the (N, 11+K) float32 layout used on disk."""
        return np.concatenate(
            [self.means, self.opacities[:, None], self.rotations, self.scales, self.attrs], axis=1
        ).astype(np.float32)

    @classmethod
    def from_tensor(cls, array: np.ndarray, dims: Optional[Tuple[int, int, int]] = None,
                    scale_bounds: Optional[Tuple[float, float]] = None,
                    quat_tolerance: float = 1e-3) -> "GaussianField":
        """
        Unpack the on-disk layout.

        Quaternions within quat_tolerance of unit norm are renormalized, others
        rejected; scales are clamped into scale_bounds when given.

        Raises:
            BundleFormatException: If the layout is wrong or a rotation is far from unit
        """
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2 or array.shape[1] <= GAUSSIAN_FIXED_COLUMNS:
            raise BundleFormatException(
                "shape_mismatch",
                f"Gaussian tensor must be (N, 11+K) with K>=1, got {array.shape}"
            )
        rotations = array[:, 4:8]
        norms = np.linalg.norm(rotations, axis=1)
        bad = np.flatnonzero(~(np.abs(norms - 1.0) <= quat_tolerance))
        if bad.size:
            raise BundleFormatException(
                "invalid_bundle",
                f"{bad.size} rotation(s) too far from unit norm, first at primitive {int(bad[0])}"
            )
        drifted = int(np.count_nonzero(np.abs(norms - 1.0) > QUAT_DRIFT))
        if drifted:
            logger.warning(f"Renormalized {drifted} quaternion(s) off unit norm")
        rotations = rotations / norms[:, None]
        scales = array[:, 8:11]
        if scale_bounds is not None:
            clamped = np.clip(scales, scale_bounds[0], scale_bounds[1])
            changed = int(np.count_nonzero(clamped != scales))
            if changed:
                logger.warning(f"Clamped {changed} scale component(s) into {tuple(scale_bounds)}")
            scales = clamped
        return cls(array[:, 0:3], array[:, 3], rotations, scales, array[:, 11:], dims)


def quaternion_to_matrix(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) unit quaternions, shape (N, 3, 3)."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=1)


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (w, x, y, z) quaternions (broadcasting)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


@dataclass(frozen=True)
class CameraModel:
    """Normalized pinhole intrinsics and an OpenCV-convention camera-to-world pose."""
    fx: float
    fy: float
    cx: float
    cy: float
    pose_c2w: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        object.__setattr__(self, "pose_c2w", _frozen(self.pose_c2w).reshape(4, 4))

    def pixel_intrinsics(self, height: int, width: int) -> np.ndarray:
        """3x3 intrinsics in pixel units for an image of the given size."""
        return np.array([
            [self.fx * width, 0.0, self.cx * width],
            [0.0, self.fy * height, self.cy * height],
            [0.0, 0.0, 1.0],
        ])

    def world_to_camera(self) -> np.ndarray:
        """Inverse of the rigid camera-to-world pose."""
        rot = self.pose_c2w[:3, :3]
        out = np.eye(4)
        out[:3, :3] = rot.T
        out[:3, 3] = -rot.T @ self.pose_c2w[:3, 3]
        return out

    def validate(self) -> List[str]:
        """List of violated camera invariants (empty when valid)."""
        issues = []
        rot = self.pose_c2w[:3, :3]
        if not np.all(np.isfinite(self.pose_c2w)):
            issues.append("pose contains non-finite values")
            return issues
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ROTATION_TOLERANCE:
            issues.append("pose rotation is not orthonormal")
        elif abs(np.linalg.det(rot) - 1.0) > ROTATION_TOLERANCE:
            issues.append("pose rotation determinant is not +1")
        if not np.allclose(self.pose_c2w[3], [0.0, 0.0, 0.0, 1.0]):
            issues.append("pose last row is not (0, 0, 0, 1)")
        if not (self.fx > 0 and self.fy > 0):
            issues.append("focal lengths must be positive")
        if not (0 < self.cx < 1 and 0 < self.cy < 1):
            issues.append("principal point must lie inside (0, 1)")
        return issues

    def to_record(self) -> Dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "pose_c2w": [[float(v) for v in row] for row in self.pose_c2w],
        }

    @classmethod
    def from_record(cls, record: Dict) -> "CameraModel":
        return cls(float(record["fx"]), float(record["fy"]), float(record["cx"]),
                   float(record["cy"]), np.array(record["pose_c2w"], dtype=np.float64))


@dataclass(frozen=True)
class SemanticPredictions:
    """Per-query mask logits (N_q,V,H,W), class logits (N_q,N_c) and hidden states (N_q,d)."""
    mask_logits: np.ndarray
    class_logits: np.ndarray
    queries: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mask_logits", _frozen(self.mask_logits))
        object.__setattr__(self, "class_logits", _frozen(self.class_logits))
        if self.queries is not None:
            object.__setattr__(self, "queries", _frozen(self.queries))

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[1]


@dataclass(frozen=True)
class ClassTaxonomy:
    """Class names and thing/stuff flags; the last class is the no-object class."""
    names: Tuple[str, ...]
    is_thing: Tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "is_thing", tuple(bool(t) for t in self.is_thing))
        if len(self.names) != len(self.is_thing) or len(self.names) < 2:
            raise DimensionMismatchException(
                "Taxonomy needs one thing flag per class and at least one class besides no-object"
            )

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def no_object(self) -> int:
        return len(self.names) - 1

    @property
    def thing_ids(self) -> List[int]:
        return [c for c in range(self.no_object) if self.is_thing[c]]

    @property
    def stuff_ids(self) -> List[int]:
        return [c for c in range(self.no_object) if not self.is_thing[c]]

    def to_record(self) -> Dict:
        return {"names": list(self.names), "is_thing": list(self.is_thing)}

    @classmethod
    def from_record(cls, record: Dict) -> "ClassTaxonomy":
        return cls(tuple(record["names"]), tuple(record["is_thing"]))


@dataclass(frozen=True)
class LabelMaps:
    """Per-view semantic and instance maps; instance ids are original query indices."""
    sem: np.ndarray
    ins: np.ndarray
    kept: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sem", _frozen(self.sem, np.int32))
        object.__setattr__(self, "ins", _frozen(self.ins, np.int32))
        object.__setattr__(self, "kept", tuple(int(k) for k in self.kept))
        if self.sem.shape != self.ins.shape or self.sem.ndim != 3:
            raise DimensionMismatchException(
                f"Semantic map {self.sem.shape} and instance map {self.ins.shape} must both be V x H x W"
            )

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.sem.shape)

    def validate(self, check_kept: bool = True) -> List[str]:
        issues = []
        if np.any((self.sem == BACKGROUND) != (self.ins == BACKGROUND)):
            issues.append("semantic and instance background disagree")
        if check_kept:
            ids = np.unique(self.ins[self.ins != BACKGROUND])
            stray = sorted(set(ids.tolist()) - set(self.kept))
            if stray:
                issues.append(f"instance ids outside kept queries: {stray[:10]}")
        return issues


@dataclass(frozen=True)
class PanopticSets:
    """Stuff-class Gaussian sets plus thing-instance Gaussian sets."""
    stuff: Dict[int, np.ndarray]
    things: Dict[int, np.ndarray]


@dataclass(frozen=True)
class SegmentationField:
    """Lifted per-Gaussian segmentation: index arrays per class, instance and panoptic segment."""
    sem_sets: Dict[int, np.ndarray]
    ins_sets: Dict[int, np.ndarray]
    pano: PanopticSets
    text_set: Optional[np.ndarray] = None
    text_id: Optional[int] = None

    def per_gaussian(self, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """Dense (sem, ins) label arrays of length count, BACKGROUND where unlabeled."""
        sem = np.full(count, BACKGROUND, dtype=np.int32)
        ins = np.full(count, BACKGROUND, dtype=np.int32)
        for class_id, members in self.sem_sets.items():
            sem[members] = class_id
        for ins_id, members in self.ins_sets.items():
            ins[members] = ins_id
        return sem, ins


def validate_bundle(field: GaussianField, preds: Optional[SemanticPredictions], cams: Sequence[CameraModel],
                    scale_bounds: Tuple[float, float] = (0.5, 15.0),
                    num_queries: Optional[int] = None) -> List[str]:
    """
    Check every scene invariant without mutating anything.

    Args:
        field: Gaussian field
        preds: Semantic predictions (None for bundles without logits)
        cams: One camera per view
        scale_bounds: Allowed range for scale components
        num_queries: Expected query count (skipped when None)

    Returns:
        List of violated invariants, empty when the bundle is valid
    """
    report: List[str] = []

    def report_primitives(label: str, bad: np.ndarray):
        for idx in bad[:MAX_REPORTED_PRIMITIVES]:
            report.append(f"primitive {int(idx)}: {label}")
        if bad.size > MAX_REPORTED_PRIMITIVES:
            report.append(f"{bad.size - MAX_REPORTED_PRIMITIVES} more primitive(s): {label}")

    packed = np.concatenate([field.means, field.opacities[:, None], field.rotations,
                             field.scales, field.attrs], axis=1)
    finite = np.all(np.isfinite(packed), axis=1)
    report_primitives("non-finite parameters", np.flatnonzero(~finite))
    report_primitives("opacity outside [0, 1]",
                      np.flatnonzero(~((field.opacities >= 0) & (field.opacities <= 1))))
    norms = np.linalg.norm(field.rotations, axis=1)
    report_primitives("rotation not unit norm",
                      np.flatnonzero(~(np.abs(norms - 1.0) <= ROTATION_TOLERANCE)))
    lo, hi = scale_bounds
    in_range = (field.scales > 0) & (field.scales >= lo) & (field.scales <= hi)
    report_primitives(f"scale outside [{lo}, {hi}]", np.flatnonzero(~np.all(in_range, axis=1)))

    if preds is not None:
        if preds.mask_logits.ndim != 4:
            report.append(f"mask logits must be N_q x V x H x W, got shape {preds.mask_logits.shape}")
        elif preds.mask_logits.shape[0] != preds.class_logits.shape[0]:
            report.append("query-count mismatch")
        if preds.queries is not None and preds.queries.shape[0] != preds.class_logits.shape[0]:
            report.append("query-count mismatch (hidden states)")
        if num_queries is not None and preds.class_logits.shape[0] != num_queries:
            report.append(f"expected {num_queries} queries, got {preds.class_logits.shape[0]}")
        if not np.all(np.isfinite(preds.mask_logits)) or not np.all(np.isfinite(preds.class_logits)):
            report.append("non-finite logits")

    if field.dims is None:
        if preds is not None:
            report.append("field is sparse (no pixel alignment)")
    else:
        if preds is not None and preds.mask_logits.ndim == 4 and tuple(preds.mask_logits.shape[1:]) != field.dims:
            report.append(
                f"mask logits dims {tuple(preds.mask_logits.shape[1:])} differ from field dims {field.dims}"
            )
        if len(cams) != field.dims[0]:
            report.append(f"expected {field.dims[0]} cameras, got {len(cams)}")
    for v, cam in enumerate(cams):
        for issue in cam.validate():
            report.append(f"camera {v}: {issue}")

    return report
