"""
Synthetic scenes with analytically known answers.

Both scenes place pixel-aligned Gaussians on a fronto-parallel plane seen by
two cameras that differ by an integer pixel shift along x, so every Gaussian of
one view lands exactly on a pixel center of the other.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from .bundle_io import SceneBundle
from .config_parser import EngineConfig, config_from_dict
from .scene_core import BACKGROUND, CameraModel, ClassTaxonomy, GaussianField, SemanticPredictions

SCENE_SIZE = 48
SHIFT_PX = 4
PLANE_DEPTH = 2.0
# Projected splat radius in pixels before dilation; kept small so a pixel's own Gaussian dominates.
SPLAT_PX = 0.05
OPACITY = 0.99
CLASS_LOGIT = 10.0
MASK_LOGIT = 30.0

TAXONOMY = ClassTaxonomy(("wall", "chair", "table", "no-object"), (False, True, True, False))
WALL, CHAIR, TABLE = 0, 1, 2

# Object boxes in view-0 pixel coordinates: (row0, row1, col0, col1), inclusive.
OBJECTS = {CHAIR: (14, 33, 10, 19), TABLE: (20, 35, 28, 39)}
COLORS = {WALL: (0.8, 0.8, 0.7), CHAIR: (0.8, 0.2, 0.2), TABLE: (0.2, 0.3, 0.8)}

SYNTHETIC_CONFIG = {"scene": {"scale_min": 1e-4, "scale_max": 15.0, "num_queries": 5}}


def synthetic_config() -> EngineConfig:
    """Engine config whose scale bounds admit the synthetic splat size."""
    return config_from_dict(SYNTHETIC_CONFIG)


def shifted_camera(shift_px: float, size: int = SCENE_SIZE) -> CameraModel:
    """Camera translated along +x so plane points move shift_px pixels to the left."""
    pose = np.eye(4)
    pose[0, 3] = shift_px * PLANE_DEPTH / size
    return CameraModel(1.0, 1.0, 0.5, 0.5, pose)


def region_map(size: int = SCENE_SIZE, shift_px: float = 0) -> np.ndarray:
    """Class per pixel of a view shifted by shift_px (wall everywhere outside the objects)."""
    rows, cols = np.meshgrid(np.arange(size), np.arange(size) + shift_px, indexing="ij")
    labels = np.full((size, size), WALL, dtype=np.int32)
    for class_id, (r0, r1, c0, c1) in OBJECTS.items():
        labels[(rows >= r0) & (rows <= r1) & (cols >= c0) & (cols <= c1)] = class_id
    return labels


def _plane_points(cam: CameraModel, size: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    k = cam.pixel_intrinsics(size, size)
    x = (xs - k[0, 2]) / k[0, 0] * PLANE_DEPTH
    y = (ys - k[1, 2]) / k[1, 1] * PLANE_DEPTH
    points = np.stack([x, y, np.full_like(x, PLANE_DEPTH, dtype=np.float64)], axis=-1).reshape(-1, 3)
    return points + cam.pose_c2w[:3, 3]


def _color_image(regions: np.ndarray) -> np.ndarray:
    image = np.zeros((3,) + regions.shape)
    for class_id, rgb in COLORS.items():
        image[:, regions == class_id] = np.asarray(rgb)[:, None]
    return image


def plane_field(regions: np.ndarray, cams, size: int = SCENE_SIZE) -> GaussianField:
    """Pixel-aligned Gaussians on the plane, colored by region."""
    count = len(cams) * size * size
    means = np.concatenate([_plane_points(cam, size) for cam in cams])
    scale = SPLAT_PX * PLANE_DEPTH / size
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    colors = np.concatenate([_color_image(regions[v]).reshape(3, -1).T for v in range(len(cams))])
    return GaussianField(means, np.full(count, OPACITY), rotations, np.full((count, 3), scale),
                         colors, (len(cams), size, size))


def _mask(regions: np.ndarray, class_id: int) -> np.ndarray:
    return np.where(regions == class_id, MASK_LOGIT, -MASK_LOGIT)


def _class_row(class_id: int) -> np.ndarray:
    row = np.zeros(TAXONOMY.num_classes)
    row[class_id] = CLASS_LOGIT
    return row


def _text_tensors(n_q: int, target_query: int) -> Dict[str, np.ndarray]:
    """Orthonormal query states and a zero-weight attention layer selecting target_query."""
    d_k = 4
    feats = np.zeros((1, n_q))
    feats[0, target_query] = 1.0
    return {
        "query_states": np.eye(n_q),
        "text_feats": feats,
        "attn_wq_0": np.zeros((n_q, d_k)),
        "attn_wk_0": np.zeros((n_q, d_k)),
        "attn_wv_0": np.zeros((n_q, n_q)),
    }


def _gt_tensors(regions: np.ndarray, ins_of_class: Dict[int, int], prefix: str,
                text_class: int) -> Dict[str, np.ndarray]:
    ins = np.vectorize(lambda c: ins_of_class.get(int(c), BACKGROUND))(regions).astype(np.int32)
    images = np.stack([_color_image(regions[v]) for v in range(regions.shape[0])])
    names = ("images", "gt_depth", "gt_sem", "gt_ins", "gt_text_masks") if prefix == "gt" else \
        ("target_images", "target_depth", "target_sem", "target_ins", "target_text_masks")
    return dict(zip(names, (
        images.astype(np.float32),
        np.full(regions.shape, PLANE_DEPTH, dtype=np.float32),
        regions.astype(np.int32),
        ins,
        (regions == text_class)[None].astype(np.uint8),
    )))


def oracle_scene(size: int = SCENE_SIZE) -> SceneBundle:
    """
    Two-view scene with perfect predictions and a held-out midpoint camera.

    Queries: 0 wall, 1 chair, 2 table, 3 and 4 no-object. Ground-truth
    instance ids equal the query indices, so perfect lifting reproduces the
    ground truth exactly. The single text prompt refers to the chair.
    """
    cams = [shifted_camera(0, size), shifted_camera(SHIFT_PX, size)]
    regions = np.stack([region_map(size, 0), region_map(size, SHIFT_PX)])
    field = plane_field(regions, cams, size)

    query_classes = [WALL, CHAIR, TABLE]
    masks = [np.stack([_mask(regions[v], c) for v in range(2)]) for c in query_classes]
    masks += [np.full((2, size, size), -MASK_LOGIT)] * 2
    class_logits = np.stack([_class_row(c) for c in query_classes] + [_class_row(TAXONOMY.no_object)] * 2)
    preds = SemanticPredictions(np.stack(masks), class_logits)

    ins_of_class = {WALL: 0, CHAIR: 1, TABLE: 2}
    extras = _text_tensors(5, 1)
    extras.update(_gt_tensors(regions, ins_of_class, "gt", CHAIR))
    target_regions = region_map(size, SHIFT_PX // 2)[None]
    extras.update(_gt_tensors(target_regions, ins_of_class, "target", CHAIR))

    return SceneBundle.create(field, cams, TAXONOMY, preds, extras,
                              target_cams=[shifted_camera(SHIFT_PX // 2, size)],
                              config=synthetic_config())


def disagreement_scene(size: int = SCENE_SIZE) -> SceneBundle:
    """
    Two-view scene whose per-view argmax disagrees on the chair's query.

    Queries 1 and 2 both predict chair; query 1 is confident in view 0 and
    query 2 in view 1. View-0 Gaussians precede view-1 Gaussians at equal
    depth, so aggregation resolves both views to query 1.
    """
    cams = [shifted_camera(0, size), shifted_camera(SHIFT_PX, size)]
    regions = np.stack([region_map(size, 0), region_map(size, SHIFT_PX)])
    field = plane_field(regions, cams, size)

    chair = regions == CHAIR
    chair_a = np.where(chair, np.array([3.0, 0.5])[:, None, None], -MASK_LOGIT)
    chair_b = np.where(chair, np.array([0.5, 3.0])[:, None, None], -MASK_LOGIT)
    masks = [
        np.stack([_mask(regions[v], WALL) for v in range(2)]),
        chair_a,
        chair_b,
        np.stack([_mask(regions[v], TABLE) for v in range(2)]),
        np.full((2, size, size), -MASK_LOGIT),
    ]
    class_logits = np.stack([_class_row(WALL), _class_row(CHAIR), _class_row(CHAIR),
                             _class_row(TABLE), _class_row(TAXONOMY.no_object)])
    preds = SemanticPredictions(np.stack(masks), class_logits)

    extras = _gt_tensors(regions, {WALL: 0, CHAIR: 1, TABLE: 3}, "gt", CHAIR)
    return SceneBundle.create(field, cams, TAXONOMY, preds, extras, config=synthetic_config())


def random_field(rng: np.random.Generator, count: int, attr_dim: int = 3,
                 dims: Optional[Tuple[int, int, int]] = None) -> GaussianField:
    """Random Gaussians in front of an identity camera with fx = fy = 1, cx = cy = 0.5."""
    depth = rng.uniform(1.5, 3.0, count)
    means = np.stack([rng.uniform(-0.5, 0.5, count) * depth,
                      rng.uniform(-0.5, 0.5, count) * depth, depth], axis=1)
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianField(means, rng.uniform(0.1, 0.99, count), quats,
                         rng.uniform(0.02, 0.2, (count, 3)), rng.uniform(0.0, 1.0, (count, attr_dim)), dims)


def random_predictions(rng: np.random.Generator, n_q: int, n_c: int,
                       dims: Tuple[int, int, int]) -> SemanticPredictions:
    """Random logits spread widely enough to keep some queries and leave some pixels background."""
    return SemanticPredictions(rng.normal(0.0, 3.0, (n_q,) + tuple(dims)),
                               rng.normal(0.0, 3.0, (n_q, n_c)))
