"""
SceneBundle on-disk format.

A bundle is a directory holding manifest.yaml and one binary blob per tensor.
Blob layout (little-endian): magic b"SIU3R1\\0", u64 dtype code, u64 rank,
rank x u64 shape, then the row-major payload.
"""

import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .config_parser import EngineConfig, config_from_dict
from .exporters.base_exporter import BaseExporter
from .lifting import LiftResult, segmentation_from_gaussian_labels
from .scene_core import (CameraModel, ClassTaxonomy, GaussianField, LabelMaps, SegmentationField,
                         SemanticPredictions, validate_bundle)
from .text_match import CrossAttentionStack, TextFeatures
from .utils.exceptions import BundleFormatException, SIU3RException
from .utils.logger import logger

MAGIC = b"SIU3R1\0"
MANIFEST_NAME = "manifest.yaml"
BLOB_SUFFIX = ".bin"

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
DTYPE_NAMES = {1: "f32", 2: "i32", 3: "u8"}
_CODE_BY_KIND = {"f": 1, "i": 2, "u": 3}

# Tensors laid out V x H x W over the context views.
VIEW_MAP_TENSORS = ("gt_depth", "gt_sem", "gt_ins", "pred_sem", "pred_ins")
# Tensors with one entry per Gaussian.
GAUSSIAN_TENSORS = ("seg_sem", "seg_ins")
# Tensors tied to pixel alignment; dropped when a field becomes sparse.
ALIGNED_TENSORS = ("mask_logits", "class_logits", "query_states", "pred_sem", "pred_ins")


def _storable(array: np.ndarray) -> Tuple[int, np.ndarray]:
    """Pick the on-disk dtype code for an array and cast it."""
    array = np.asarray(array)
    if array.dtype == np.bool_ or array.dtype == np.uint8:
        return 3, array.astype(DTYPE_CODES[3])
    if array.dtype.kind in ("i", "u"):
        return 2, array.astype(DTYPE_CODES[2])
    if array.dtype.kind == "f":
        return 1, array.astype(DTYPE_CODES[1])
    raise BundleFormatException("unsupported_dtype", f"Cannot store tensors of dtype {array.dtype}")


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize one tensor into the blob layout."""
    code, data = _storable(array)
    header = MAGIC + np.array([code, data.ndim, *data.shape], dtype="<u8").tobytes()
    return header + np.ascontiguousarray(data).tobytes()


def decode_tensor(blob: bytes, name: str = "tensor") -> np.ndarray:
    """
    Parse one blob.

    Raises:
        BundleFormatException: bad_magic, unsupported_dtype or payload_length_mismatch
    """
    if blob[:len(MAGIC)] != MAGIC:
        raise BundleFormatException("bad_magic", f"{name}: bad magic")
    offset = len(MAGIC)
    if len(blob) < offset + 16:
        raise BundleFormatException("payload_length_mismatch", f"{name}: truncated header")
    code, rank = (int(v) for v in np.frombuffer(blob, dtype="<u8", count=2, offset=offset))
    if code not in DTYPE_CODES:
        raise BundleFormatException("unsupported_dtype", f"{name}: unsupported dtype code {code}")
    offset += 16
    if len(blob) < offset + 8 * rank:
        raise BundleFormatException("payload_length_mismatch", f"{name}: truncated shape")
    shape = tuple(int(v) for v in np.frombuffer(blob, dtype="<u8", count=rank, offset=offset))
    offset += 8 * rank
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise BundleFormatException(
            "payload_length_mismatch",
            f"{name}: payload has {len(blob) - offset} bytes, header implies {expected}"
        )
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).copy()


class BlobExporter(BaseExporter):
    """Writes one tensor blob."""

    def get_format(self) -> str:
        """Return blob format name."""
        return "blob"

    def write(self, array: np.ndarray) -> None:
        with open(self.temp_path, 'wb') as f:
            f.write(encode_tensor(array))


def write_tensor(array: np.ndarray, path: str) -> str:
    """Write one tensor blob atomically."""
    return BlobExporter(path).export(array)


def read_tensor(path: str) -> np.ndarray:
    """Read one tensor blob."""
    name = os.path.basename(path)
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except FileNotFoundError:
        raise BundleFormatException("missing_tensor", f"Tensor file not found: {path}")
    except OSError as e:
        raise BundleFormatException("missing_tensor", f"Failed to read {path}: {str(e)}")
    return decode_tensor(blob, name)


@dataclass
class SceneBundle:
    """
    In-memory scene bundle.

    `tensors` holds every stored tensor exactly as read; the field and the
    predictions are decoded from it.
    """
    tensors: Dict[str, np.ndarray]
    field: GaussianField
    cams: List[CameraModel]
    taxonomy: ClassTaxonomy
    preds: Optional[SemanticPredictions] = None
    target_cams: List[CameraModel] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    kept: Tuple[int, ...] = ()
    text_ids: Tuple[int, ...] = ()

    @classmethod
    def create(cls, gaussians: GaussianField, cams: Sequence[CameraModel], taxonomy: ClassTaxonomy,
               preds: Optional[SemanticPredictions] = None,
               extras: Optional[Dict[str, np.ndarray]] = None,
               target_cams: Sequence[CameraModel] = (),
               config: Optional[EngineConfig] = None) -> "SceneBundle":
        """Assemble a bundle from in-memory objects (tensors are cast to their stored dtypes)."""
        tensors = {"gaussians": gaussians.to_tensor()}
        if preds is not None:
            tensors["mask_logits"] = preds.mask_logits
            tensors["class_logits"] = preds.class_logits
            if preds.queries is not None:
                tensors["query_states"] = preds.queries
        tensors.update(extras or {})
        tensors = {name: _storable(array)[1] for name, array in tensors.items()}
        snapshot = (config or EngineConfig()).to_dict()
        return cls._decode(tensors, gaussians.dims, list(cams), taxonomy, list(target_cams), snapshot,
                           (), ())

    @classmethod
    def _decode(cls, tensors, dims, cams, taxonomy, target_cams, snapshot, kept, text_ids) -> "SceneBundle":
        config = config_from_dict(snapshot or {})
        gaussians = GaussianField.from_tensor(tensors["gaussians"], dims, config.scene.scale_bounds,
                                              config.scene.quat_tolerance)
        preds = None
        if "mask_logits" in tensors and "class_logits" in tensors:
            preds = SemanticPredictions(tensors["mask_logits"], tensors["class_logits"],
                                        tensors.get("query_states"))
        return cls(tensors, gaussians, cams, taxonomy, preds, target_cams, snapshot,
                   tuple(int(k) for k in kept), tuple(int(t) for t in text_ids))

    @property
    def dims(self) -> Optional[Tuple[int, int, int]]:
        return self.field.dims

    @property
    def engine_config(self) -> EngineConfig:
        return config_from_dict(self.config or {})

    def get(self, name: str) -> Optional[np.ndarray]:
        return self.tensors.get(name)

    def label_maps(self, prefix: str = "gt") -> Optional[LabelMaps]:
        """LabelMaps from `<prefix>_sem` / `<prefix>_ins` (gt, pred or target)."""
        sem, ins = self.get(f"{prefix}_sem"), self.get(f"{prefix}_ins")
        if sem is None or ins is None:
            return None
        return LabelMaps(sem, ins, self.kept if prefix == "pred" else ())

    def segmentation(self) -> Optional[SegmentationField]:
        """Lifted per-Gaussian segmentation stored in seg_sem / seg_ins."""
        sem, ins = self.get("seg_sem"), self.get("seg_ins")
        if sem is None or ins is None:
            return None
        return segmentation_from_gaussian_labels(sem, ins, self.taxonomy)

    def text_features(self) -> Optional[TextFeatures]:
        feats = self.get("text_feats")
        return None if feats is None else TextFeatures(feats)

    def attention_stack(self) -> Optional[CrossAttentionStack]:
        if "attn_wq_0" not in self.tensors:
            return None
        return CrossAttentionStack.from_tensors(self.tensors)

    def with_lift(self, result: LiftResult, text_ids: Sequence[int] = ()) -> "SceneBundle":
        """Copy carrying the lifted label maps and per-Gaussian labels."""
        seg_sem, seg_ins = result.segmentation.per_gaussian(self.field.count)
        tensors = dict(self.tensors)
        tensors.update({
            "pred_sem": _storable(result.labels.sem)[1],
            "pred_ins": _storable(result.labels.ins)[1],
            "seg_sem": _storable(seg_sem)[1],
            "seg_ins": _storable(seg_ins)[1],
        })
        return replace(self, tensors=tensors, kept=result.labels.kept,
                       text_ids=tuple(int(t) for t in text_ids))

    def with_field(self, gaussians: GaussianField,
                   seg: Optional[SegmentationField] = None) -> "SceneBundle":
        """Copy with a new (possibly sparse) field; aligned tensors are dropped when sparse."""
        tensors = dict(self.tensors)
        tensors["gaussians"] = gaussians.to_tensor()
        preds = self.preds
        if gaussians.is_sparse:
            for name in ALIGNED_TENSORS:
                tensors.pop(name, None)
            preds = None
        if seg is not None:
            seg_sem, seg_ins = seg.per_gaussian(gaussians.count)
            tensors["seg_sem"] = _storable(seg_sem)[1]
            tensors["seg_ins"] = _storable(seg_ins)[1]
        else:
            tensors.pop("seg_sem", None)
            tensors.pop("seg_ins", None)
        decoded = GaussianField.from_tensor(tensors["gaussians"], gaussians.dims)
        return replace(self, tensors=tensors, field=decoded, preds=preds)

    def manifest(self) -> Dict[str, Any]:
        """Manifest content for the current tensors."""
        catalog = {}
        for name, array in self.tensors.items():
            code, data = _storable(array)
            catalog[name] = {"file": f"{name}{BLOB_SUFFIX}", "dtype": DTYPE_NAMES[code],
                             "shape": [int(d) for d in data.shape]}
        return {
            "format": MAGIC.rstrip(b"\0").decode(),
            "dims": None if self.dims is None else list(self.dims),
            "taxonomy": self.taxonomy.to_record(),
            "cameras": [cam.to_record() for cam in self.cams],
            "target_cameras": [cam.to_record() for cam in self.target_cams],
            "tensors": catalog,
            "config": self.config,
            "kept": list(self.kept),
            "text_ids": list(self.text_ids),
        }


def _check_shapes(tensors: Dict[str, np.ndarray], dims: Optional[Tuple[int, int, int]], count: int):
    if dims is not None:
        for name in VIEW_MAP_TENSORS:
            if name in tensors and tuple(tensors[name].shape) != tuple(dims):
                raise BundleFormatException(
                    "shape_mismatch", f"{name} has shape {tensors[name].shape}, expected {tuple(dims)}"
                )
    for name in GAUSSIAN_TENSORS:
        if name in tensors and tensors[name].shape != (count,):
            raise BundleFormatException(
                "shape_mismatch", f"{name} has shape {tensors[name].shape}, expected ({count},)"
            )


def read_bundle(path: str, validate: bool = True) -> SceneBundle:
    """
    Load a bundle directory.

    Args:
        path: Bundle directory
        validate: Check every scene invariant after loading

    Returns:
        SceneBundle

    Raises:
        BundleFormatException: With a distinct code per failure
    """
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, 'r') as f:
            manifest = yaml.safe_load(f)
    except FileNotFoundError:
        raise BundleFormatException("manifest_parse", f"Manifest not found: {manifest_path}")
    except yaml.YAMLError as e:
        raise BundleFormatException("manifest_parse", f"Failed to parse manifest: {str(e)}")
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), dict):
        raise BundleFormatException("manifest_parse", "Manifest must be a mapping with a 'tensors' catalog")

    catalog = manifest["tensors"]
    if "gaussians" not in catalog:
        raise BundleFormatException("missing_tensor", "Bundle has no 'gaussians' tensor")

    tensors = {}
    for name, entry in catalog.items():
        array = read_tensor(os.path.join(path, entry.get("file", f"{name}{BLOB_SUFFIX}")))
        declared = tuple(int(d) for d in entry.get("shape", array.shape))
        if declared != array.shape:
            raise BundleFormatException(
                "shape_mismatch", f"{name}: manifest shape {declared} differs from blob shape {array.shape}"
            )
        tensors[name] = array

    try:
        dims = manifest.get("dims")
        dims = None if dims is None else tuple(int(d) for d in dims)
        taxonomy = ClassTaxonomy.from_record(manifest["taxonomy"])
        cams = [CameraModel.from_record(r) for r in manifest.get("cameras") or []]
        target_cams = [CameraModel.from_record(r) for r in manifest.get("target_cameras") or []]
        bundle = SceneBundle._decode(tensors, dims, cams, taxonomy, target_cams,
                                     manifest.get("config") or {}, manifest.get("kept") or (),
                                     manifest.get("text_ids") or ())
    except BundleFormatException:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise BundleFormatException("manifest_parse", f"Malformed manifest entry: {str(e)}")
    except SIU3RException as e:
        raise BundleFormatException("invalid_bundle", str(e))

    _check_shapes(tensors, bundle.dims, bundle.field.count)
    if validate:
        scene = bundle.engine_config.scene
        issues = validate_bundle(bundle.field, bundle.preds, bundle.cams, scene.scale_bounds)
        if issues:
            raise BundleFormatException("invalid_bundle", "; ".join(issues[:10]))
    logger.info(f"Loaded bundle {path}: {len(tensors)} tensor(s), dims {bundle.dims}")
    return bundle


def write_bundle(bundle: SceneBundle, path: str) -> str:
    """
    Write a bundle directory atomically.

    Blobs go into a temporary sibling directory, the manifest is written last,
    and the directory is renamed into place. An existing bundle is moved aside
    first and deleted only once the new one is in place; a failed swap puts it back.
    """
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=f".{os.path.basename(path)}.")
    try:
        for name, array in bundle.tensors.items():
            write_tensor(array, os.path.join(staging, f"{name}{BLOB_SUFFIX}"))
        with open(os.path.join(staging, MANIFEST_NAME), 'w') as f:
            yaml.safe_dump(bundle.manifest(), f, sort_keys=False)

        if os.path.exists(path):
            retired = tempfile.mkdtemp(dir=parent, prefix=f".{os.path.basename(path)}.old.")
            os.rmdir(retired)
            os.rename(path, retired)
            try:
                os.rename(staging, path)
            except OSError:
                os.rename(retired, path)
                raise
            shutil.rmtree(retired, ignore_errors=True)
        else:
            os.rename(staging, path)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise BundleFormatException("invalid_bundle", f"Failed to write bundle {path}: {str(e)}")
    logger.info(f"Wrote bundle {path} ({len(bundle.tensors)} tensor(s))")
    return path
