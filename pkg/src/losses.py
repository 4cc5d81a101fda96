"""
Training-objective evaluation.

Photometric L1 and optional perceptual terms, the Hungarian-matched mask loss,
the mask-guided depth continuity loss and their weighted total, together with
the assignment solver and a central-difference gradient checker.
"""

import importlib
from dataclasses import astuple, dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, log_softmax, softmax

from .scene_core import BACKGROUND, LabelMaps, SemanticPredictions
from .utils.exceptions import (ConfigurationException, DimensionMismatchException,
                               NonFiniteException)
from .utils.logger import logger


@dataclass(frozen=True)
class LossWeights:
    """Weights of the photometric, perceptual, mask, continuity and text terms."""
    photometric: float = 1.0
    perceptual: float = 0.5
    mask: float = 0.05
    continuity: float = 0.05
    text: float = 1.0

    def __post_init__(self):
        for name, value in zip(("photometric", "perceptual", "mask", "continuity", "text"), astuple(self)):
            if value < 0:
                raise ConfigurationException(f"Invalid value for 'losses.weights.{name}': {value}")


@dataclass(frozen=True)
class MatchCost:
    """Per-term weights of the query-to-mask matching cost."""
    w_class: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0

    def __post_init__(self):
        values = astuple(self)
        if any(v < 0 for v in values) or not any(v > 0 for v in values):
            raise ConfigurationException(f"Invalid value for 'losses.match_cost': {values}")


@dataclass(frozen=True)
class LossComponents:
    """Unweighted loss terms in weight order."""
    photometric: float = 0.0
    perceptual: float = 0.0
    mask: float = 0.0
    continuity: float = 0.0
    text: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


@dataclass(frozen=True)
class MaskLossResult:
    """Mask loss value, its terms and the query-to-gt assignment."""
    loss: float
    assignment: List[Tuple[int, int]]
    class_term: float
    bce_term: float
    dice_term: float
    no_object_term: float
    cost: np.ndarray = field(repr=False)


class PerceptualMetric(Protocol):
    """External perceptual distance between two K x H x W images."""

    def __call__(self, img: np.ndarray, gt: np.ndarray) -> float:
        ...


def load_perceptual_plugin(spec: str) -> PerceptualMetric:
    """
    Import a perceptual metric given as 'package.module:function'.

    Raises:
        ConfigurationException: If the plugin cannot be imported or is not callable
    """
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ConfigurationException(f"Perceptual plugin must look like 'module:function', got '{spec}'")
    try:
        metric = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigurationException(f"Failed to load perceptual plugin '{spec}': {str(e)}")
    if not callable(metric):
        raise ConfigurationException(f"Perceptual plugin '{spec}' is not callable")
    logger.info(f"Loaded perceptual plugin: {spec}")
    return metric


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray) -> List[Tuple[int, int]]:
    """
    Minimum-cost assignment of min(n, m) pairs.

    Among all optimal assignments the lexicographically smallest list of
    (row, col) pairs is returned: rows are fixed in order, each trying its
    columns in ascending order (leaving a row unassigned comes last) and
    keeping the first choice that still admits an optimal completion.

    Args:
        cost: n x m finite cost matrix

    Returns:
        Sorted list of (row, col) pairs
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionMismatchException(f"Cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise NonFiniteException("Cost matrix contains non-finite values")

    best = _optimum(cost)
    tol = 1e-9 * max(1.0, abs(best))
    fixed = 0.0
    free_cols = list(range(m))
    assignment: List[Tuple[int, int]] = []

    for r in range(n):
        if not free_cols:
            break
        rest_rows = np.arange(r + 1, n)
        chosen = None
        for c in free_cols:
            rest_cols = [k for k in free_cols if k != c]
            total = fixed + cost[r, c] + _optimum(cost[np.ix_(rest_rows, rest_cols)])
            if total <= best + tol:
                chosen = c
                break
        if chosen is None:
            # skipping only keeps the cardinality when enough rows remain
            if rest_rows.size < len(free_cols):
                raise RuntimeError("No optimal completion found for assignment refinement")
            continue
        assignment.append((r, chosen))
        fixed += cost[r, chosen]
        free_cols.remove(chosen)

    return assignment


def _mask_terms(preds: SemanticPredictions, gt: np.ndarray, logit_cap: float, dice_smooth: float):
    """Pairwise mean BCE and Dice between sigmoid masks (N_q) and gt masks (K)."""
    logits = np.clip(preds.mask_logits.reshape(preds.num_queries, -1), -logit_cap, logit_cap)
    prob = expit(logits)
    log_p = np.log(prob)
    log_1mp = np.log1p(-prob)
    n_pix = logits.shape[1]
    bce = -(log_p @ gt.T + log_1mp @ (1.0 - gt).T) / n_pix
    inter = prob @ gt.T
    dice = (2.0 * inter + dice_smooth) / (prob.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :] + dice_smooth)
    return bce, dice


def mask_loss(preds: SemanticPredictions, gt_masks: Sequence[np.ndarray], gt_classes: Sequence[int],
              cost: Optional[MatchCost] = None, logit_cap: float = 30.0,
              dice_smooth: float = 1.0) -> MaskLossResult:
    """
    Hungarian-matched mask loss.

    cost[n, k] = w_class * (-p_class) + w_bce * meanBCE + w_dice * (1 - Dice); the
    loss is matched class CE + matched BCE + matched Dice + no-object CE of the
    unmatched queries, each averaged over its own pairs or queries.

    Raises:
        DimensionMismatchException: If there are more gt masks than queries or masks disagree in size
        ValueError: If a gt class is outside the taxonomy (no-object included)
    """
    cost = cost or MatchCost()
    n_q, n_c = preds.num_queries, preds.num_classes
    gt_classes = [int(c) for c in gt_classes]
    if len(gt_masks) != len(gt_classes):
        raise DimensionMismatchException(f"{len(gt_masks)} gt mask(s) but {len(gt_classes)} class id(s)")
    if len(gt_masks) > n_q:
        raise DimensionMismatchException(f"{len(gt_masks)} gt masks exceed {n_q} queries")
    for c in gt_classes:
        if not 0 <= c < n_c - 1:
            raise ValueError(f"Gt class {c} outside taxonomy of {n_c - 1} classes")
    if np.any(np.isnan(preds.mask_logits)) or np.any(np.isnan(preds.class_logits)):
        raise NonFiniteException("Predictions contain NaN logits")

    pix_shape = preds.mask_logits.shape[1:]
    gt = np.zeros((len(gt_masks), int(np.prod(pix_shape))))
    for k, mask in enumerate(gt_masks):
        mask = np.asarray(mask)
        if mask.shape != pix_shape:
            raise DimensionMismatchException(f"Gt mask {k} has shape {mask.shape}, expected {pix_shape}")
        gt[k] = mask.reshape(-1).astype(np.float64)

    log_cls = log_softmax(np.clip(preds.class_logits, -logit_cap, logit_cap), axis=1)
    prob_cls = np.exp(log_cls)
    bce, dice = _mask_terms(preds, gt, logit_cap, dice_smooth)
    classes = np.asarray(gt_classes, dtype=np.int64)
    matrix = (cost.w_class * -prob_cls[:, classes] + cost.w_bce * bce + cost.w_dice * (1.0 - dice))

    assignment = hungarian(matrix)
    rows = np.array([r for r, _ in assignment], dtype=np.int64)
    cols = np.array([c for _, c in assignment], dtype=np.int64)
    if assignment:
        class_term = float(np.mean(-log_cls[rows, classes[cols]]))
        bce_term = float(np.mean(bce[rows, cols]))
        dice_term = float(np.mean(1.0 - dice[rows, cols]))
    else:
        class_term = bce_term = dice_term = 0.0
    unmatched = np.setdiff1d(np.arange(n_q), rows)
    no_object_term = float(np.mean(-log_cls[unmatched, n_c - 1])) if unmatched.size else 0.0

    loss = class_term + bce_term + dice_term + no_object_term
    logger.debug(
        f"Mask loss {loss:.6f} (class {class_term:.6f}, bce {bce_term:.6f}, "
        f"dice {dice_term:.6f}, no-object {no_object_term:.6f})"
    )
    return MaskLossResult(loss, assignment, class_term, bce_term, dice_term, no_object_term, matrix)


def masks_from_labels(labels: LabelMaps) -> Tuple[List[np.ndarray], List[int]]:
    """
    Ground-truth instance masks and classes from label maps with global instance ids.

    The class of an instance is its most frequent semantic label.
    """
    masks, classes = [], []
    for ins_id in np.unique(labels.ins[labels.ins != BACKGROUND]):
        mask = labels.ins == ins_id
        values, counts = np.unique(labels.sem[mask], return_counts=True)
        masks.append(mask)
        classes.append(int(values[np.argmax(counts)]))
    return masks, classes


def _neighbor_sum(values: np.ndarray, ins: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sum of values and count over 4-neighbors sharing the same (non-background) instance id."""
    total = np.zeros_like(values, dtype=np.float64)
    count = np.zeros(values.shape, dtype=np.float64)
    # vertical pairs, then horizontal pairs
    for a, b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                 ((slice(None), slice(None), slice(None, -1)), (slice(None), slice(None), slice(1, None)))):
        same = (ins[a] != BACKGROUND) & (ins[a] == ins[b])
        total[a] += np.where(same, values[b], 0.0)
        total[b] += np.where(same, values[a], 0.0)
        count[a] += same
        count[b] += same
    return total, count


def _continuity_residuals(depth: np.ndarray, labels: LabelMaps):
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != labels.dims:
        raise DimensionMismatchException(f"Depth {depth.shape} does not match labels {labels.dims}")
    if not np.all(np.isfinite(depth[labels.ins != BACKGROUND])):
        raise NonFiniteException("Depth is non-finite on labeled pixels")
    total, count = _neighbor_sum(depth, labels.ins)
    has = count > 0
    residual = np.where(has, depth - total / np.maximum(count, 1.0), 0.0)
    return residual, count


def continuity_loss(depth: np.ndarray, labels: LabelMaps) -> float:
    """
    Sum over labeled pixels of (D(p) - mean of same-instance 4-neighbors)^2.

    Pixels without a same-instance neighbor contribute zero.
    """
    residual, _ = _continuity_residuals(depth, labels)
    return float(np.sum(residual ** 2))


def continuity_loss_grad(depth: np.ndarray, labels: LabelMaps) -> np.ndarray:
    """Analytic gradient of continuity_loss with respect to depth."""
    residual, count = _continuity_residuals(depth, labels)
    spread = np.where(count > 0, 2.0 * residual / np.maximum(count, 1.0), 0.0)
    incoming, _ = _neighbor_sum(spread, labels.ins)
    return 2.0 * residual - incoming


def photometric_l1(img: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference."""
    img, gt = np.asarray(img, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise DimensionMismatchException(f"Image {img.shape} and gt {gt.shape} differ")
    return float(np.mean(np.abs(img - gt)))


def photometric_l1_grad(img: np.ndarray, gt: np.ndarray) -> np.ndarray:
    img, gt = np.asarray(img, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise DimensionMismatchException(f"Image {img.shape} and gt {gt.shape} differ")
    return np.sign(img - gt) / img.size


def total_loss(components: Union[LossComponents, Sequence[float]], weights: Optional[LossWeights] = None,
               perceptual: Optional[float] = None) -> float:
    """
    Weighted sum of the loss terms.

    Args:
        components: LossComponents or the five terms in weight order
        weights: Term weights (default weights when None)
        perceptual: External perceptual value replacing the perceptual component

    Returns:
        Scalar total loss
    """
    weights = weights or LossWeights()
    if isinstance(components, LossComponents):
        values = components.as_array()
    else:
        values = np.asarray(components, dtype=np.float64)
        if values.shape != (5,):
            raise DimensionMismatchException(f"Expected 5 loss components, got {values.shape}")
    if perceptual is not None:
        values = values.copy()
        values[1] = perceptual
    if not np.all(np.isfinite(values)):
        raise NonFiniteException(f"Non-finite loss component(s): {values.tolist()}")
    return float(np.dot(values, np.array(astuple(weights))))


def grad_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
               params: np.ndarray, eps: float = 1e-4) -> float:
    """
    Largest |g_analytic - g_fd| / max(1, |g_fd|) over all coordinates.

    Raises:
        NonFiniteException: If f is non-finite at any probed point
    """
    params = np.array(params, dtype=np.float64)
    analytic = np.asarray(grad(params), dtype=np.float64).reshape(-1)
    flat = params.reshape(-1)
    worst = 0.0
    for idx in range(flat.size):
        saved = flat[idx]
        flat[idx] = saved + eps
        f_plus = f(params)
        flat[idx] = saved - eps
        f_minus = f(params)
        flat[idx] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteException(f"Function is non-finite around coordinate {idx}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


def evaluate_losses(rendered: Sequence[np.ndarray], gt_images: Sequence[np.ndarray],
                    preds: Optional[SemanticPredictions] = None,
                    gt_labels: Optional[LabelMaps] = None,
                    depth: Optional[np.ndarray] = None,
                    text_term: float = 0.0,
                    perceptual: Optional[PerceptualMetric] = None,
                    cost: Optional[MatchCost] = None,
                    logit_cap: float = 30.0,
                    dice_smooth: float = 1.0) -> LossComponents:
    """
    Every loss term for one scene.

    Args:
        rendered: Rendered images per view (K x H x W)
        gt_images: Ground-truth images per view
        preds: Semantic predictions (mask term skipped when None)
        gt_labels: Ground-truth label maps with global instance ids
        depth: Rendered V x H x W depth (continuity term skipped when None)
        text_term: Precomputed text matching loss
        perceptual: Optional perceptual plugin
        cost: Matching-cost weights

    Returns:
        LossComponents
    """
    if len(rendered) != len(gt_images):
        raise DimensionMismatchException(f"{len(rendered)} rendered view(s) but {len(gt_images)} gt image(s)")
    photometric = float(np.mean([photometric_l1(r, g) for r, g in zip(rendered, gt_images)])) if rendered else 0.0
    perceptual_value = 0.0
    if perceptual is not None and rendered:
        perceptual_value = float(np.mean([perceptual(r, g) for r, g in zip(rendered, gt_images)]))

    mask_value = 0.0
    continuity_value = 0.0
    if gt_labels is not None:
        if preds is not None:
            masks, classes = masks_from_labels(gt_labels)
            mask_value = mask_loss(preds, masks, classes, cost, logit_cap, dice_smooth).loss
        if depth is not None:
            continuity_value = continuity_loss(depth, gt_labels)

    components = LossComponents(photometric, perceptual_value, mask_value, continuity_value, float(text_term))
    logger.info(f"Loss components: {components}")
    return components
