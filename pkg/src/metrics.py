"""
Evaluation metrics: image quality, depth accuracy and cross-view segmentation
quality computed with global ids pooled over all views.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import convolve2d

from .config_parser import EngineConfig, MetricsConfig, RasterConfig
from .lifting import InstancePrediction, filter_queries, instance_predictions, lift_pipeline
from .scene_core import BACKGROUND, CameraModel, ClassTaxonomy, GaussianField, LabelMaps
from .splat_raster import render, render_onehot_ids
from .utils.exceptions import DimensionMismatchException, MissingChannelException
from .utils.logger import logger
from .view_pairing import nearest_pixel_inside, reproject

# Value reported by psnr for identical images.
PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class PanopticResult:
    """Panoptic quality, its factors and the per-class breakdown."""
    pq: float
    sq: float
    rq: float
    per_class: Dict[int, Dict[str, float]] = field(default_factory=dict)


@dataclass
class EvalReport:
    """Evaluation results; metrics not computed stay None."""
    mode: str = "context"
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    absrel: Optional[float] = None
    rmse: Optional[float] = None
    miou_s: Optional[float] = None
    miou_t: Optional[float] = None
    map: Optional[float] = None
    pq: Optional[float] = None
    sq: Optional[float] = None
    rq: Optional[float] = None
    agreement: Optional[float] = None
    per_class_iou: Dict[int, float] = field(default_factory=dict)
    per_class_pq: Dict[int, Dict[str, float]] = field(default_factory=dict)

    def scalars(self) -> Dict[str, Optional[float]]:
        """Flat metric name -> value mapping (tables excluded)."""
        values = asdict(self)
        values.pop("per_class_iou")
        values.pop("per_class_pq")
        values.pop("mode")
        return values

    def validate(self) -> List[str]:
        """Names of ratio metrics outside [0, 1] (SSIM outside [-1, 1])."""
        issues = []
        for name, value in self.scalars().items():
            if value is None or name in ("psnr", "absrel", "rmse"):
                continue
            lo = -1.0 if name == "ssim" else 0.0
            if not lo - 1e-9 <= value <= 1.0 + 1e-9:
                issues.append(f"{name}={value} outside [{lo}, 1]")
        return issues


def _as_float(array) -> np.ndarray:
    return np.asarray(array, dtype=np.float64)


def psnr(img: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) after clamping to [0, peak]; identical images give +inf."""
    img, gt = _as_float(img), _as_float(gt)
    if img.shape != gt.shape:
        raise DimensionMismatchException(f"Image {img.shape} and gt {gt.shape} differ")
    mse = float(np.mean((np.clip(img, 0.0, peak) - np.clip(gt, 0.0, peak)) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def _grayscale(img: np.ndarray) -> np.ndarray:
    img = _as_float(img)
    return img.mean(axis=0) if img.ndim == 3 else img


def ssim(img: np.ndarray, gt: np.ndarray, config: Optional[MetricsConfig] = None) -> float:
    """
    Mean SSIM over all valid window positions.

    Color images (K x H x W) are converted to grayscale by channel mean.

    Raises:
        DimensionMismatchException: For differing shapes or images smaller than the window
    """
    config = config or MetricsConfig()
    x, y = _grayscale(img), _grayscale(gt)
    if x.shape != y.shape:
        raise DimensionMismatchException(f"Image {x.shape} and gt {y.shape} differ")
    size = config.ssim_window
    if x.shape[0] < size or x.shape[1] < size:
        raise DimensionMismatchException(f"Image {x.shape} is smaller than the {size}x{size} window")

    window = gaussian_window(size, config.ssim_sigma)
    c1 = (config.ssim_k1 * config.psnr_peak) ** 2
    c2 = (config.ssim_k2 * config.psnr_peak) ** 2

    def filt(a):
        return convolve2d(a, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  valid: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    (AbsRel, RMSE) over the valid pixels (default: finite positive gt).

    Raises:
        ValueError: If no pixel is valid
    """
    pred, gt = _as_float(pred), _as_float(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatchException(f"Depth {pred.shape} and gt {gt.shape} differ")
    if valid is None:
        valid = np.isfinite(gt) & (gt > 0)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("Depth metrics need at least one valid pixel")
    diff = pred[valid] - gt[valid]
    absrel = float(np.mean(np.abs(diff) / gt[valid]))
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    return absrel, rmse


def _labels(maps) -> np.ndarray:
    return maps.sem if isinstance(maps, LabelMaps) else np.asarray(maps)


def per_class_iou(pred, gt) -> Dict[int, float]:
    """IoU per class present in gt, pooled over every view; gt BACKGROUND pixels are ignored."""
    pred, gt = _labels(pred).ravel(), _labels(gt).ravel()
    if pred.shape != gt.shape:
        raise DimensionMismatchException(f"Prediction {pred.shape} and gt {gt.shape} differ")
    labeled = gt != BACKGROUND
    pred, gt = pred[labeled], gt[labeled]
    result = {}
    for c in np.unique(gt):
        p, g = pred == c, gt == c
        result[int(c)] = float(np.count_nonzero(p & g) / np.count_nonzero(p | g))
    return result


def miou(pred, gt, taxonomy: Optional[ClassTaxonomy] = None) -> float:
    """
    Mean IoU over the classes present in gt.

    Args:
        pred: Predicted semantic maps (LabelMaps or V x H x W ids)
        gt: Ground-truth semantic maps
        taxonomy: When given, classes outside it (no-object included) are dropped from the mean
    """
    ious = per_class_iou(pred, gt)
    if taxonomy is not None:
        ious = {c: v for c, v in ious.items() if 0 <= c < taxonomy.no_object}
    if not ious:
        logger.warning("No labeled ground-truth pixels; mIoU reported as 0")
        return 0.0
    return float(np.mean(list(ious.values())))


def miou_text(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """Per-prompt IoU of text-referred masks averaged over prompts; two empty masks score 1."""
    if len(pred_masks) != len(gt_masks):
        raise DimensionMismatchException(f"{len(pred_masks)} predicted vs {len(gt_masks)} gt text masks")
    if not gt_masks:
        logger.warning("No text prompts; mIoU_t reported as 0")
        return 0.0
    scores = []
    for p, g in zip(pred_masks, gt_masks):
        p, g = np.asarray(p, dtype=bool), np.asarray(g, dtype=bool)
        union = np.count_nonzero(p | g)
        scores.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(scores))


def instances_from_labels(labels: LabelMaps, score: float = 1.0) -> List[InstancePrediction]:
    """Pooled instances of label maps, classed by their most frequent semantic label."""
    out = []
    for ins_id in np.unique(labels.ins[labels.ins != BACKGROUND]):
        mask = labels.ins == ins_id
        classes, counts = np.unique(labels.sem[mask], return_counts=True)
        out.append(InstancePrediction(int(ins_id), int(classes[np.argmax(counts)]), score, mask))
    return out


def _mask_iou(preds: Sequence[InstancePrediction], gts: Sequence[InstancePrediction]) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(x.mask, dtype=np.float64).ravel() for x in preds])
    g = np.stack([np.asarray(x.mask, dtype=np.float64).ravel() for x in gts])
    inter = p @ g.T
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)


def average_precision(preds: Sequence[InstancePrediction], gts: Sequence[InstancePrediction],
                      threshold: float, recall_points: int = 101) -> float:
    """
    Interpolated AP of one class at one IoU threshold.

    Predictions are matched greedily in descending confidence to the unmatched
    gt with the highest IoU >= threshold.
    """
    if not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)
    ious = _mask_iou([preds[k] for k in order], gts)
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order))
    for row in range(len(order)):
        candidates = np.where(~matched & (ious[row] >= threshold), ious[row], -1.0)
        if candidates.size and candidates.max() >= 0:
            best = int(np.argmax(candidates))
            matched[best] = True
            tp[row] = 1.0

    if len(order) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / len(gts)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]

    grid = np.arange(recall_points) / (recall_points - 1)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.where(idx < len(recall), precision[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.mean(sampled))


def instance_ap(preds: Sequence[InstancePrediction], gts: Sequence[InstancePrediction],
                thing_ids: Optional[Sequence[int]] = None,
                config: Optional[MetricsConfig] = None) -> float:
    """
    Mask AP averaged over IoU thresholds and over thing classes that have gt.

    Args:
        preds: Predicted pooled instances with confidences
        gts: Ground-truth pooled instances
        thing_ids: Classes to evaluate (default: every class seen in gt)
        config: Thresholds and recall points
    """
    config = config or MetricsConfig()
    classes = sorted({g.class_id for g in gts if thing_ids is None or g.class_id in set(thing_ids)})
    if not classes:
        logger.warning("No ground-truth thing instances; mAP reported as 0")
        return 0.0
    per_class = []
    for c in classes:
        p = [x for x in preds if x.class_id == c]
        g = [x for x in gts if x.class_id == c]
        per_class.append(np.mean([average_precision(p, g, t, config.recall_points)
                                  for t in config.iou_thresholds]))
    return float(np.mean(per_class))


def _segment_codes(maps: LabelMaps, thing_ids: Sequence[int], stride: int) -> np.ndarray:
    sem = maps.sem.ravel().astype(np.int64)
    ins = maps.ins.ravel().astype(np.int64)
    is_thing = np.isin(sem, list(thing_ids))
    codes = sem * stride + np.where(is_thing, ins + 1, 0)
    return np.where(sem == BACKGROUND, -1, codes)


def panoptic_quality(pred: LabelMaps, gt: LabelMaps, taxonomy: ClassTaxonomy,
                     match_iou: float = 0.5) -> PanopticResult:
    """
    PQ, SQ and RQ over pooled panoptic segments.

    Stuff segments are whole classes; thing segments are (class, instance id)
    pairs. Segments match when their IoU exceeds match_iou. Gt BACKGROUND is
    void: it is removed from unions, and unmatched predictions lying mostly on
    void are not counted as false positives.
    """
    if pred.dims != gt.dims:
        raise DimensionMismatchException(f"Prediction {pred.dims} and gt {gt.dims} differ")
    stride = int(max(pred.ins.max(initial=0), gt.ins.max(initial=0))) + 2
    p_codes = _segment_codes(pred, taxonomy.thing_ids, stride)
    g_codes = _segment_codes(gt, taxonomy.thing_ids, stride)

    p_ids, p_area = np.unique(p_codes[p_codes >= 0], return_counts=True)
    g_ids, g_area = np.unique(g_codes[g_codes >= 0], return_counts=True)
    p_area = dict(zip(p_ids.tolist(), p_area.tolist()))
    g_area = dict(zip(g_ids.tolist(), g_area.tolist()))

    pairs, counts = np.unique(np.stack([p_codes, g_codes], axis=1), axis=0, return_counts=True)
    void = {int(p): int(n) for (p, g), n in zip(pairs, counts) if p >= 0 and g < 0}

    stats = {c: {"tp": 0, "fp": 0, "fn": 0, "iou": 0.0} for c in range(taxonomy.no_object)}
    p_matched, g_matched = set(), set()
    for (p, g), inter in zip(pairs.tolist(), counts.tolist()):
        if p < 0 or g < 0 or p // stride != g // stride:
            continue
        union = p_area[p] + g_area[g] - inter - void.get(p, 0)
        iou = inter / union
        if iou > match_iou:
            stats[g // stride]["tp"] += 1
            stats[g // stride]["iou"] += iou
            p_matched.add(p)
            g_matched.add(g)

    for g in g_area:
        if g not in g_matched and g // stride in stats:
            stats[g // stride]["fn"] += 1
    for p in p_area:
        if p in p_matched or p // stride not in stats:
            continue
        if void.get(p, 0) / p_area[p] > 0.5:
            continue
        stats[p // stride]["fp"] += 1

    per_class = {}
    for c, s in stats.items():
        denom = s["tp"] + 0.5 * s["fp"] + 0.5 * s["fn"]
        if denom == 0:
            continue
        sq = s["iou"] / s["tp"] if s["tp"] else 0.0
        rq = s["tp"] / denom
        per_class[c] = {"pq": sq * rq, "sq": sq, "rq": rq,
                        "tp": s["tp"], "fp": s["fp"], "fn": s["fn"]}
    if not per_class:
        logger.warning("No panoptic segments in prediction or gt; PQ reported as 0")
        return PanopticResult(0.0, 0.0, 0.0, {})
    return PanopticResult(
        pq=float(np.mean([v["pq"] for v in per_class.values()])),
        sq=float(np.mean([v["sq"] for v in per_class.values()])),
        rq=float(np.mean([v["rq"] for v in per_class.values()])),
        per_class=per_class,
    )


def cross_view_agreement(labels: LabelMaps, field: GaussianField, cams: Sequence[CameraModel],
                         depth_tolerance: float = 0.1) -> float:
    """
    Fraction of cross-view corresponding labeled pixels whose instance ids agree.

    Pixel p of view v corresponds to pixel q of view u when the Gaussian of p
    projects to q and lands within depth_tolerance of the Gaussian of q.
    Returns 1.0 when no labeled correspondence exists.
    """
    if field.is_sparse or field.dims != labels.dims:
        raise DimensionMismatchException(f"Label dims {labels.dims} do not match field dims {field.dims}")
    n_views, height, width = labels.dims
    means = field.means.reshape(n_views, height * width, 3)
    ins = labels.ins.reshape(n_views, -1)
    agree = total = 0
    for v in range(n_views):
        src = np.flatnonzero(ins[v] != BACKGROUND)
        for u in range(n_views):
            if u == v or src.size == 0:
                continue
            pix, depth = reproject(means[v, src], cams[u], (height, width))
            inside = np.flatnonzero(nearest_pixel_inside(pix, depth, (height, width)))
            col = np.floor(pix[inside, 0] + 0.5).astype(np.int64)
            row = np.floor(pix[inside, 1] + 0.5).astype(np.int64)
            target = row * width + col
            w2c = cams[u].world_to_camera()
            target_depth = means[u, target] @ w2c[2, :3] + w2c[2, 3]
            close = np.abs(target_depth - depth[inside]) < depth_tolerance
            src_ids = ins[v, src[inside]][close]
            dst_ids = ins[u, target][close]
            labeled = dst_ids != BACKGROUND
            agree += int(np.count_nonzero(src_ids[labeled] == dst_ids[labeled]))
            total += int(np.count_nonzero(labeled))
    if total == 0:
        logger.warning("No labeled cross-view correspondences; agreement reported as 1")
        return 1.0
    return agree / total


def evaluate_labels(pred: LabelMaps, gt: LabelMaps, taxonomy: ClassTaxonomy,
                    pred_instances: Optional[List[InstancePrediction]] = None,
                    config: Optional[MetricsConfig] = None,
                    report: Optional[EvalReport] = None) -> EvalReport:
    """Fill the segmentation metrics of a report from pooled label maps."""
    config = config or MetricsConfig()
    report = report or EvalReport()
    report.per_class_iou = {c: v for c, v in per_class_iou(pred, gt).items() if c < taxonomy.no_object}
    report.miou_s = miou(pred, gt, taxonomy)
    pano = panoptic_quality(pred, gt, taxonomy, config.pq_match_iou)
    report.pq, report.sq, report.rq, report.per_class_pq = pano.pq, pano.sq, pano.rq, pano.per_class
    instances = pred_instances if pred_instances is not None else instances_from_labels(pred)
    report.map = instance_ap(instances, instances_from_labels(gt), taxonomy.thing_ids, config)
    return report


def evaluate_images(rendered: Sequence[np.ndarray], gt_images: Sequence[np.ndarray],
                    config: Optional[EngineConfig] = None,
                    report: Optional[EvalReport] = None) -> EvalReport:
    """Fill PSNR and SSIM (averaged over views)."""
    config = config or EngineConfig()
    report = report or EvalReport()
    values = [psnr(r, g, config.metrics.psnr_peak) for r, g in zip(rendered, gt_images)]
    report.psnr = float(np.mean(values)) if values else None
    report.ssim = float(np.mean([ssim(r, g, config.metrics) for r, g in zip(rendered, gt_images)])) \
        if values else None
    return report


EVAL_MODES = {"context": "context", "context-2d": "context", "novel": "novel", "novel-3d": "novel"}
METRIC_GROUPS = ("image", "depth", "segmentation", "text")


def _render_views(field: GaussianField, cams: Sequence[CameraModel], size: Tuple[int, int],
                  config: EngineConfig):
    return [render(field, cam, size, config.raster) for cam in cams]


def render_label_maps(field: GaussianField, seg_sem: np.ndarray, seg_ins: np.ndarray,
                      cams: Sequence[CameraModel], size: Tuple[int, int],
                      config: Optional[RasterConfig] = None, kept: Sequence[int] = ()) -> LabelMaps:
    """
    Rasterize per-Gaussian (class, instance) labels into LabelMaps.

    Every distinct (class, instance) pair is one panoptic id, so a single
    argmax decides both maps and a pixel is BACKGROUND in sem exactly when it
    is BACKGROUND in ins. Gaussians missing either label feed the background
    channel and still occlude.

    Raises:
        DimensionMismatchException: If the label arrays do not match the field
    """
    seg_sem = np.asarray(seg_sem).reshape(-1)
    seg_ins = np.asarray(seg_ins).reshape(-1)
    if seg_sem.shape != seg_ins.shape:
        raise DimensionMismatchException(f"Got {seg_sem.size} semantic and {seg_ins.size} instance labels")
    labeled = (seg_sem != BACKGROUND) & (seg_ins != BACKGROUND)
    partial = int(np.count_nonzero((seg_sem != BACKGROUND) != (seg_ins != BACKGROUND)))
    if partial:
        logger.debug(f"{partial} Gaussian(s) carry only one of class and instance; rendered as background")
    pairs = np.stack([seg_sem, seg_ins], axis=1)[labeled]
    panoptic = np.full(seg_sem.shape, BACKGROUND, dtype=np.int64)
    if pairs.size:
        pairs, inverse = np.unique(pairs, axis=0, return_inverse=True)
        panoptic[labeled] = inverse.reshape(-1)

    codes = np.stack([render_onehot_ids(field, panoptic, cam, size, config) for cam in cams])
    sem = np.full(codes.shape, BACKGROUND, dtype=np.int32)
    ins = np.full(codes.shape, BACKGROUND, dtype=np.int32)
    hit = codes != BACKGROUND
    sem[hit] = pairs[codes[hit], 0]
    ins[hit] = pairs[codes[hit], 1]
    maps = LabelMaps(sem, ins, kept)
    issues = maps.validate(check_kept=False)
    if issues:
        raise DimensionMismatchException(f"Rendered label maps are inconsistent: {issues}")
    return maps


def evaluate_bundle(pred, gt, mode: str = "context", config: Optional[EngineConfig] = None,
                    require: Sequence[str] = ()) -> EvalReport:
    """
    Evaluate a prediction bundle against a ground-truth bundle.

    context: lifted label maps and renders at the input views.
    novel: the field and its lifted segmentation are rasterized into the gt
    bundle's target cameras (one panoptic id per class and instance pair, per-pixel argmax).

    Args:
        pred: Prediction SceneBundle
        gt: Ground-truth SceneBundle
        mode: 'context' or 'novel'
        config: Engine configuration (default: the prediction bundle's snapshot)
        require: Metric groups ('image', 'depth', 'segmentation', 'text') that must be computed

    Raises:
        MissingChannelException: If a required group lacks its gt channels
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"Unknown evaluation mode '{mode}'. Supported: {sorted(EVAL_MODES)}")
    mode = EVAL_MODES[mode]
    unknown = set(require) - set(METRIC_GROUPS)
    if unknown:
        raise ValueError(f"Unknown metric group(s) {sorted(unknown)}. Supported: {list(METRIC_GROUPS)}")
    config = config or pred.engine_config
    taxonomy = gt.taxonomy
    report = EvalReport(mode=mode)

    prefix = "gt" if mode == "context" else "target"
    if mode == "context":
        cams = pred.cams
        if pred.dims is None:
            raise MissingChannelException("Context evaluation needs a pixel-aligned prediction bundle")
        size = pred.dims[1:]
    else:
        cams = gt.target_cams or pred.target_cams
        if not cams:
            raise MissingChannelException("Novel-view evaluation needs target cameras")
        reference = gt.get("target_sem") if gt.get("target_sem") is not None else gt.get("target_depth")
        if reference is None and gt.get("target_images") is not None:
            reference = gt.get("target_images")[:, 0]
        if reference is None:
            raise MissingChannelException("Novel-view evaluation needs target_sem, target_depth or target_images")
        size = tuple(reference.shape[-2:])

    def missing(group: str, channels: str):
        if group in require:
            raise MissingChannelException(f"Metric group '{group}' needs {channels}")
        logger.info(f"Skipping {group} metrics: no {channels}")

    images_key = "images" if mode == "context" else "target_images"
    depth_key = "gt_depth" if mode == "context" else "target_depth"
    renders = None
    if gt.get(images_key) is not None or gt.get(depth_key) is not None:
        renders = _render_views(pred.field, cams, size, config)

    if gt.get(images_key) is not None and pred.field.attr_dim == 3:
        evaluate_images([r.attr_image for r in renders], list(gt.get(images_key)), config, report)
    else:
        missing("image", f"'{images_key}' with RGB predictions")

    if gt.get(depth_key) is not None:
        rendered_depth = np.stack([r.depth_image for r in renders])
        report.absrel, report.rmse = depth_metrics(rendered_depth, gt.get(depth_key))
    else:
        missing("depth", f"'{depth_key}'")

    gt_labels = gt.label_maps(prefix)
    pred_labels = None
    filtered = None
    if gt_labels is not None:
        if pred.preds is not None:
            filtered = filter_queries(pred.preds, config.lifting.tau_c)
        if mode == "context":
            pred_labels = pred.label_maps("pred")
            if pred_labels is None:
                if pred.preds is None:
                    raise MissingChannelException("Prediction bundle has neither lifted labels nor logits")
                pred_labels = lift_pipeline(pred.field, pred.preds, pred.cams, taxonomy, config).labels
        else:
            seg = pred.segmentation()
            if seg is None:
                if pred.preds is None:
                    raise MissingChannelException("Prediction bundle has neither a lifted segmentation nor logits")
                seg = lift_pipeline(pred.field, pred.preds, pred.cams, taxonomy, config).segmentation
            seg_sem, seg_ins = seg.per_gaussian(pred.field.count)
            pred_labels = render_label_maps(pred.field, seg_sem, seg_ins, cams, size, config.raster, pred.kept)
        instances = None
        if filtered is not None:
            instances = instance_predictions(pred_labels, filtered, taxonomy)
        evaluate_labels(pred_labels, gt_labels, taxonomy, instances, config.metrics, report)
        if mode == "context" and not pred.field.is_sparse:
            report.agreement = cross_view_agreement(pred_labels, pred.field, pred.cams,
                                                    config.pairing.depth_tolerance)
    else:
        missing("segmentation", f"'{prefix}_sem' and '{prefix}_ins'")

    text_key = "gt_text_masks" if mode == "context" else "target_text_masks"
    if gt.get(text_key) is not None and pred_labels is not None and pred.text_ids:
        gt_text = gt.get(text_key)
        pred_text = [pred_labels.ins == t for t in pred.text_ids[:len(gt_text)]]
        report.miou_t = miou_text(pred_text, list(gt_text[:len(pred_text)]))
    else:
        missing("text", f"'{text_key}' with selected text queries")

    issues = report.validate()
    if issues:
        logger.warning(f"Report values out of range: {issues}")
    logger.info(f"Evaluation ({mode}) finished")
    return report
