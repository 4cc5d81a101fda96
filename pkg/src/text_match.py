"""
Open-vocabulary query selection and text matching supervision.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .losses import MatchCost, _mask_terms, hungarian
from .scene_core import SemanticPredictions
from .utils.exceptions import DimensionMismatchException, NonFiniteException
from .utils.logger import logger


@dataclass(frozen=True)
class AttentionLayer:
    """Single-head cross-attention projections."""
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


@dataclass(frozen=True)
class CrossAttentionStack:
    """L2 cross-attention layers; text rows attend to the queries with a residual."""
    layers: Tuple[AttentionLayer, ...]

    def __post_init__(self):
        if len(self.layers) < 1:
            raise DimensionMismatchException("Cross-attention stack needs at least one layer")
        for idx, layer in enumerate(self.layers):
            for name in ("w_q", "w_k", "w_v"):
                weights = getattr(layer, name)
                if not np.all(np.isfinite(weights)):
                    raise NonFiniteException(f"Layer {idx}: {name} contains non-finite values")
            if layer.w_q.shape[1] != layer.w_k.shape[1]:
                raise DimensionMismatchException(
                    f"Layer {idx}: key dimension of W_q {layer.w_q.shape} and W_k {layer.w_k.shape} differ"
                )
            if layer.w_v.shape[1] != layer.w_q.shape[0]:
                raise DimensionMismatchException(
                    f"Layer {idx}: W_v {layer.w_v.shape} must map queries back to text dimension {layer.w_q.shape[0]}"
                )

    @property
    def d_text(self) -> int:
        return self.layers[0].w_q.shape[0]

    @property
    def d_query(self) -> int:
        return self.layers[0].w_k.shape[0]

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "CrossAttentionStack":
        """
        Build a stack from attn_wq_<l>, attn_wk_<l>, attn_wv_<l> tensors (l = 0, 1, ...).

        Raises:
            DimensionMismatchException: If no layer or an incomplete layer is present
        """
        layers = []
        while f"attn_wq_{len(layers)}" in tensors:
            l = len(layers)
            try:
                layers.append(AttentionLayer(
                    np.asarray(tensors[f"attn_wq_{l}"], dtype=np.float64),
                    np.asarray(tensors[f"attn_wk_{l}"], dtype=np.float64),
                    np.asarray(tensors[f"attn_wv_{l}"], dtype=np.float64),
                ))
            except KeyError as e:
                raise DimensionMismatchException(f"Attention layer {l} is incomplete: missing {str(e)}")
        logger.debug(f"Loaded {len(layers)} attention layer(s)")
        return cls(tuple(layers))


@dataclass(frozen=True)
class TextFeatures:
    """One feature row per text prompt."""
    feats: np.ndarray

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.feats, dtype=np.float64))
        if not np.all(np.isfinite(feats)):
            raise NonFiniteException("Text features contain non-finite values")
        object.__setattr__(self, "feats", feats)

    @property
    def num_prompts(self) -> int:
        return self.feats.shape[0]


def attend(text: TextFeatures, queries: np.ndarray, stack: CrossAttentionStack) -> np.ndarray:
    """
    Refine text features by attending over the query hidden states.

    Per layer: t <- t + softmax((t W_q)(Q W_k)^T / sqrt(d_k)) (Q W_v).

    Returns:
        N_t x d_text refined features
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != stack.d_query or text.feats.shape[1] != stack.d_text:
        raise DimensionMismatchException(
            f"Text {text.feats.shape} and queries {queries.shape} do not fit a stack "
            f"with d_text={stack.d_text}, d={stack.d_query}"
        )
    out = text.feats.copy()
    for layer in stack.layers:
        logits = (out @ layer.w_q) @ (queries @ layer.w_k).T / np.sqrt(layer.w_q.shape[1])
        out = out + softmax(logits, axis=1) @ (queries @ layer.w_v)
    return out


def select_query(text: TextFeatures, queries: np.ndarray,
                 stack: CrossAttentionStack) -> Tuple[np.ndarray, np.ndarray]:
    """
    Best-matching query per prompt.

    Returns:
        (text_id per prompt, score matrix N_t x N_q); ties go to the lowest index
    """
    queries = np.asarray(queries, dtype=np.float64)
    scores = attend(text, queries, stack) @ queries.T
    text_ids = np.argmax(scores, axis=1).astype(np.int64)
    logger.info(f"Selected queries {text_ids.tolist()} for {text.num_prompts} prompt(s)")
    return text_ids, scores


def text_matching_loss(scores: np.ndarray, gt_onehot: np.ndarray) -> float:
    """
    Mean over prompts of cross-entropy between softmax(score row) and the one-hot gt row.

    Raises:
        ValueError: If a gt row is not one-hot
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt_onehot, dtype=np.float64))
    if scores.shape != gt.shape:
        raise DimensionMismatchException(f"Scores {scores.shape} and gt {gt.shape} differ")
    if not (np.all((gt == 0) | (gt == 1)) and np.all(gt.sum(axis=1) == 1)):
        raise ValueError("Every gt row must be one-hot")
    if scores.shape[0] == 0:
        return 0.0
    return float(np.mean(-np.sum(gt * log_softmax(scores, axis=1), axis=1)))


def gt_assignment_from_masks(pred_masks: np.ndarray, gt_text_masks: Sequence[np.ndarray],
                             cost: MatchCost = None, logit_cap: float = 30.0,
                             dice_smooth: float = 1.0) -> np.ndarray:
    """
    One-hot target query per text-referred gt mask through Hungarian matching.

    Args:
        pred_masks: N_q x V x H x W binary (or probability) masks
        gt_text_masks: One binary V x H x W mask per prompt

    Returns:
        N_t x N_q one-hot rows

    Raises:
        DimensionMismatchException: If there are more gt masks than queries
    """
    cost = cost or MatchCost()
    pred = np.asarray(pred_masks, dtype=np.float64)
    n_q = pred.shape[0]
    if len(gt_text_masks) > n_q:
        raise DimensionMismatchException(f"{len(gt_text_masks)} gt masks exceed {n_q} queries")
    gt = np.stack([np.asarray(m, dtype=np.float64).reshape(-1) for m in gt_text_masks]) \
        if len(gt_text_masks) else np.zeros((0, int(np.prod(pred.shape[1:]))))
    if gt.shape[1] != int(np.prod(pred.shape[1:])):
        raise DimensionMismatchException("Predicted and gt text masks differ in resolution")

    # binary masks become saturated logits so the mask cost matches mask_loss
    logits = np.where(pred >= 0.5, logit_cap, -logit_cap)
    proxy = SemanticPredictions(logits, np.zeros((n_q, 1)))
    bce, dice = _mask_terms(proxy, gt, logit_cap, dice_smooth)
    matrix = cost.w_bce * bce + cost.w_dice * (1.0 - dice)

    onehot = np.zeros((gt.shape[0], n_q))
    for row, col in hungarian(matrix.T):
        onehot[row, col] = 1.0
    return onehot
