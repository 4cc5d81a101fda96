"""
Pixel-aligned 2D-to-3D lifting.

Query filtering, class-wise query probability maps Z (V x N_q' x N_c x H x W),
multi-view mask aggregation by rasterizing Z as a Gaussian payload, cross-view
label derivation and lifting of the labels onto the Gaussians that share
their pixel index.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from .config_parser import EngineConfig, LiftingConfig, RasterConfig
from .scene_core import (BACKGROUND, CameraModel, ClassTaxonomy, GaussianField, LabelMaps,
                         PanopticSets, SegmentationField, SemanticPredictions)
from .splat_raster import render_semantic
from .utils.exceptions import (AttributeBudgetException, DimensionMismatchException,
                               NonFiniteException, UnknownInstanceException)
from .utils.logger import logger


@dataclass(frozen=True)
class FilteredQueries:
    """Row-filtered predictions of the kept queries."""
    kept: Tuple[int, ...]
    mask_logits: np.ndarray
    class_logits: np.ndarray
    queries: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ClassQueryMaps:
    """Class-wise query probability maps and the factors they were built from."""
    z: np.ndarray
    kept: Tuple[int, ...]
    class_conf: np.ndarray
    mask_prob: np.ndarray
    aggregated: bool = False


@dataclass(frozen=True)
class InstancePrediction:
    """A predicted instance pooled over all views."""
    ins_id: int
    class_id: int
    score: float
    mask: np.ndarray


@dataclass(frozen=True)
class LiftResult:
    """Everything produced by one lifting run."""
    filtered: FilteredQueries
    maps: ClassQueryMaps
    labels: LabelMaps
    segmentation: SegmentationField
    text_sets: Dict[int, np.ndarray] = field(default_factory=dict)


def filter_queries(preds: SemanticPredictions, tau_c: float = 0.5) -> FilteredQueries:
    """
    Keep queries whose top softmax class probability exceeds tau_c and is not no-object.

    Args:
        preds: Semantic predictions; the last class is no-object
        tau_c: Confidence threshold in (0, 1)

    Returns:
        FilteredQueries (kept may be empty)
    """
    if not 0 < tau_c < 1:
        raise ValueError(f"tau_c must lie in (0, 1), got {tau_c}")
    conf = softmax(preds.class_logits, axis=1)
    no_object = preds.num_classes - 1
    keep = (conf.max(axis=1) > tau_c) & (conf.argmax(axis=1) != no_object)
    kept = tuple(int(n) for n in np.flatnonzero(keep))
    logger.info(f"Kept {len(kept)}/{preds.num_queries} queries (tau_c={tau_c})")
    return FilteredQueries(
        kept=kept,
        mask_logits=preds.mask_logits[list(kept)],
        class_logits=preds.class_logits[list(kept)],
        queries=None if preds.queries is None else preds.queries[list(kept)],
    )


def class_query_maps(class_logits: np.ndarray, mask_logits: np.ndarray,
                     kept: Sequence[int] = (), logit_cap: float = 30.0) -> ClassQueryMaps:
    """
    Z[v, n, c, i, j] = softmax(C')[n, c] * sigmoid(M')[n, v, i, j].

    Mask logits are clipped to +/- logit_cap (infinities included) before the sigmoid.

    Raises:
        NonFiniteException: For NaN logits or infinite class logits
        DimensionMismatchException: If the query axes disagree
    """
    class_logits = np.asarray(class_logits, dtype=np.float64)
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    if class_logits.shape[0] != mask_logits.shape[0] or mask_logits.ndim != 4:
        raise DimensionMismatchException(
            f"Class logits {class_logits.shape} and mask logits {mask_logits.shape} disagree"
        )
    if not np.all(np.isfinite(class_logits)) or np.any(np.isnan(mask_logits)):
        raise NonFiniteException("Non-finite logits")

    class_conf = softmax(class_logits, axis=1) if class_logits.size else class_logits.copy()
    mask_prob = expit(np.clip(mask_logits, -logit_cap, logit_cap))
    z = class_conf[None, :, :, None, None] * np.transpose(mask_prob, (1, 0, 2, 3))[:, :, None, :, :]
    kept = tuple(kept) if len(kept) else tuple(range(class_logits.shape[0]))
    return ClassQueryMaps(z=z, kept=kept, class_conf=class_conf, mask_prob=mask_prob)


def aggregate_multiview(maps: ClassQueryMaps, field: GaussianField, cams: Sequence[CameraModel],
                        config: Optional[LiftingConfig] = None,
                        raster_config: Optional[RasterConfig] = None) -> ClassQueryMaps:
    """
    Fuse class-wise query maps across views through the Gaussians.

    Every Gaussian takes Z at its own pixel as payload; the payload is rendered
    into each view. Pixels whose accumulated alpha stays below coverage_min keep
    their pre-aggregation values.

    Raises:
        DimensionMismatchException: For sparse fields or mismatched dims
        AttributeBudgetException: If N_q' * N_c exceeds the configured budget
    """
    config = config or LiftingConfig()
    if len(maps.kept) == 0:
        logger.info("No kept queries; skipping multi-view aggregation")
        return maps
    if field.is_sparse:
        raise DimensionMismatchException("Lifting requires a pixel-aligned (non-sparse) field")
    n_views, n_q, n_c, height, width = maps.z.shape
    if field.dims != (n_views, height, width) or len(cams) != n_views:
        raise DimensionMismatchException(
            f"Maps cover {(n_views, height, width)} but field has dims {field.dims} "
            f"and {len(cams)} camera(s)"
        )
    k_dim = n_q * n_c
    if k_dim > config.attr_budget:
        raise AttributeBudgetException(
            f"Aggregation needs {k_dim} channels, budget is {config.attr_budget}"
        )

    attrs = np.transpose(maps.z, (0, 3, 4, 1, 2)).reshape(n_views * height * width, k_dim)
    fused = np.empty_like(maps.z)
    for v, cam in enumerate(cams):
        out = render_semantic(field, attrs, cam, (height, width), raster_config)
        rendered = out.attr_image.reshape(n_q, n_c, height, width)
        low = out.alpha_image < config.coverage_min
        fused[v] = np.where(low[None, None], maps.z[v], rendered)
        logger.debug(f"View {v}: {int(low.sum())} low-coverage pixel(s) kept their own maps")

    fused = np.clip(fused, 0.0, 1.0)
    logger.info(f"Aggregated {k_dim} semantic channels across {n_views} view(s)")
    return ClassQueryMaps(z=fused, kept=maps.kept, class_conf=maps.class_conf,
                          mask_prob=maps.mask_prob, aggregated=True)


def derive_label_maps(maps: ClassQueryMaps, tau: float, taxonomy: ClassTaxonomy) -> LabelMaps:
    """
    Derive cross-view semantic and instance maps from Z.

    M_q, I_q = max/argmax of Z over queries; M_sem = argmax of M_q over classes
    (no-object excluded); the instance is I_q gathered at M_sem and mapped back
    to the original query index. Pixels whose winning probability is below tau
    are BACKGROUND. Ties go to the lower index.
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    n_views, n_q, n_c, height, width = maps.z.shape
    if n_q == 0:
        empty = np.full((n_views, height, width), BACKGROUND, dtype=np.int32)
        return LabelMaps(empty, empty.copy(), ())

    z = maps.z[:, :, :taxonomy.no_object]
    m_q = z.max(axis=1)
    i_q = z.argmax(axis=1)
    m_sem = m_q.argmax(axis=1)
    win = np.take_along_axis(m_q, m_sem[:, None], axis=1)[:, 0]
    local = np.take_along_axis(i_q, m_sem[:, None], axis=1)[:, 0]

    kept = np.asarray(maps.kept, dtype=np.int64)
    sem = m_sem.astype(np.int32)
    ins = kept[local].astype(np.int32)
    background = win < tau
    sem[background] = BACKGROUND
    ins[background] = BACKGROUND
    return LabelMaps(sem, ins, maps.kept)


def _index_sets(labels: np.ndarray) -> Dict[int, np.ndarray]:
    ids = np.unique(labels[labels != BACKGROUND])
    return {int(i): np.flatnonzero(labels == i) for i in ids}


def lift_to_3d(labels: LabelMaps, field: GaussianField, taxonomy: ClassTaxonomy,
               text_id: Optional[int] = None) -> SegmentationField:
    """
    Lift per-pixel labels onto the pixel-aligned Gaussians.

    Raises:
        DimensionMismatchException: If label dims differ from the field dims
        UnknownInstanceException: If text_id is not a kept query
    """
    if field.is_sparse or field.dims != labels.dims:
        raise DimensionMismatchException(
            f"Label dims {labels.dims} do not match field dims {field.dims}"
        )
    if text_id is not None and int(text_id) not in labels.kept:
        raise UnknownInstanceException(f"Text query {text_id} is not among the kept queries")

    sem = labels.sem.ravel()
    ins = labels.ins.ravel()
    sem_sets = _index_sets(sem)
    ins_sets = _index_sets(ins)

    stuff_ids = set(taxonomy.stuff_ids)
    thing_pixels = np.isin(sem, taxonomy.thing_ids)
    stuff = {c: members for c, members in sem_sets.items() if c in stuff_ids}
    things = _index_sets(np.where(thing_pixels, ins, BACKGROUND))

    text_set = None
    if text_id is not None:
        text_set = ins_sets.get(int(text_id), np.zeros(0, dtype=np.int64))
    return SegmentationField(sem_sets, ins_sets, PanopticSets(stuff, things), text_set,
                             None if text_id is None else int(text_id))


def segmentation_from_gaussian_labels(sem: np.ndarray, ins: np.ndarray,
                                      taxonomy: ClassTaxonomy) -> SegmentationField:
    """Rebuild a SegmentationField from dense per-Gaussian label arrays."""
    sem = np.asarray(sem).ravel()
    ins = np.asarray(ins).ravel()
    sem_sets = _index_sets(sem)
    stuff_ids = set(taxonomy.stuff_ids)
    stuff = {c: members for c, members in sem_sets.items() if c in stuff_ids}
    things = _index_sets(np.where(np.isin(sem, taxonomy.thing_ids), ins, BACKGROUND))
    return SegmentationField(sem_sets, _index_sets(ins), PanopticSets(stuff, things))


def instance_predictions(labels: LabelMaps, filtered: FilteredQueries,
                         taxonomy: ClassTaxonomy) -> List[InstancePrediction]:
    """
    Pooled cross-view instances with a class and a confidence.

    The class is the most frequent semantic label under the instance; the
    confidence is the query's softmax probability for that class.
    """
    conf = softmax(filtered.class_logits, axis=1) if len(filtered.kept) else None
    position = {q: row for row, q in enumerate(filtered.kept)}
    out = []
    for ins_id in np.unique(labels.ins[labels.ins != BACKGROUND]):
        mask = labels.ins == ins_id
        classes, counts = np.unique(labels.sem[mask], return_counts=True)
        class_id = int(classes[np.argmax(counts)])
        row = position.get(int(ins_id))
        score = float(conf[row, class_id]) if row is not None else 0.0
        out.append(InstancePrediction(int(ins_id), class_id, score, mask))
    return out


def lift_pipeline(field: GaussianField, preds: SemanticPredictions, cams: Sequence[CameraModel],
                  taxonomy: ClassTaxonomy, config: Optional[EngineConfig] = None,
                  aggregate: bool = True, text_ids: Optional[Sequence[int]] = None) -> LiftResult:
    """
    Run the full lifting: filter, Z, aggregation (optional), labels and 3D sets.

    Args:
        field: Pixel-aligned Gaussian field
        preds: Semantic predictions
        cams: One camera per view
        taxonomy: Class taxonomy
        config: Engine configuration
        aggregate: False skips multi-view aggregation and keeps the per-view labels
        text_ids: Selected query per text prompt

    Returns:
        LiftResult
    """
    config = config or EngineConfig()
    lifting = config.lifting
    filtered = filter_queries(preds, lifting.tau_c)
    maps = class_query_maps(filtered.class_logits, filtered.mask_logits, filtered.kept,
                            lifting.logit_cap)
    if aggregate:
        maps = aggregate_multiview(maps, field, cams, lifting, config.raster)
    labels = derive_label_maps(maps, lifting.tau, taxonomy)

    text_sets: Dict[int, np.ndarray] = {}
    first_text = None
    for prompt, text_id in enumerate(text_ids or []):
        if int(text_id) not in labels.kept:
            logger.warning(f"Prompt {prompt}: selected query {text_id} was filtered out")
            text_sets[prompt] = np.zeros(0, dtype=np.int64)
            continue
        if first_text is None:
            first_text = int(text_id)
        text_sets[prompt] = np.flatnonzero(labels.ins.ravel() == int(text_id))

    segmentation = lift_to_3d(labels, field, taxonomy, first_text)
    logger.info(
        f"Lifted {len(segmentation.sem_sets)} semantic class(es) and "
        f"{len(segmentation.ins_sets)} instance(s)"
    )
    return LiftResult(filtered, maps, labels, segmentation, text_sets)
