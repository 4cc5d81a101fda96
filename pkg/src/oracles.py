"""
Slow scalar reference implementations used to cross-check the vectorized engine.

Nothing here is tuned; every routine loops the way the defining formula reads.
"""

import itertools
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config_parser import RasterConfig
from .scene_core import BACKGROUND, CameraModel, GaussianField, LabelMaps


def brute_force_render(field: GaussianField, cam: CameraModel, size: Tuple[int, int],
                       attrs: Optional[np.ndarray] = None,
                       config: Optional[RasterConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel compositing over every Gaussian, without tiles or culling.

    Returns:
        (K x H x W attributes, H x W alpha)
    """
    config = config or RasterConfig()
    height, width = size
    attrs = field.attrs if attrs is None else np.asarray(attrs, dtype=np.float64)
    w2c = cam.world_to_camera()
    k = cam.pixel_intrinsics(height, width)
    covs = field.covariances()

    splats = []
    for idx in range(field.count):
        p = w2c[:3, :3] @ field.means[idx] + w2c[:3, 3]
        if p[2] <= config.near_plane:
            continue
        x, y, z = p
        jac = np.array([[k[0, 0] / z, 0.0, -k[0, 0] * x / (z * z)],
                        [0.0, k[1, 1] / z, -k[1, 1] * y / (z * z)]])
        cov = jac @ w2c[:3, :3] @ covs[idx] @ w2c[:3, :3].T @ jac.T + config.dilation * np.eye(2)
        mean = np.array([k[0, 0] * x / z + k[0, 2], k[1, 1] * y / z + k[1, 2]])
        splats.append((z, idx, mean, np.linalg.inv(cov)))
    splats.sort(key=lambda s: (s[0], s[1]))

    image = np.zeros((attrs.shape[1], height, width))
    alpha_image = np.zeros((height, width))
    for i in range(height):
        for j in range(width):
            transmittance = 1.0
            for _, idx, mean, inv in splats:
                if transmittance < config.transmittance_min:
                    break
                d = np.array([j, i], dtype=np.float64) - mean
                a = min(config.opacity_cap, field.opacities[idx] * math.exp(-0.5 * d @ inv @ d))
                image[:, i, j] += attrs[idx] * a * transmittance
                alpha_image[i, j] += a * transmittance
                transmittance *= 1.0 - a
    return image, alpha_image


def permutation_assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost over every assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    n, m = cost.shape
    if n == 0:
        return 0.0
    return min(sum(cost[r, c] for r, c in zip(range(n), cols))
               for cols in itertools.permutations(range(m), n))


def _softmax_row(row: Sequence[float]) -> List[float]:
    top = max(row)
    exps = [math.exp(v - top) for v in row]
    total = sum(exps)
    return [e / total for e in exps]


def _sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def scalar_lifting(mask_logits: np.ndarray, class_logits: np.ndarray, tau_c: float, tau: float,
                   logit_cap: float = 30.0):
    """
    Triple-loop filter / Z / argmax reference without aggregation.

    Returns:
        (kept query indices, Z as nested lists [v][n][c][i][j], sem map, ins map)
    """
    n_q, n_views, height, width = mask_logits.shape
    n_c = class_logits.shape[1]
    no_object = n_c - 1

    kept = []
    for n in range(n_q):
        probs = _softmax_row(list(class_logits[n]))
        best = max(range(n_c), key=lambda c: (probs[c], -c))
        if probs[best] > tau_c and best != no_object:
            kept.append(n)

    conf = [_softmax_row(list(class_logits[n])) for n in kept]
    z = np.zeros((n_views, len(kept), n_c, height, width))
    for v in range(n_views):
        for r, n in enumerate(kept):
            for c in range(n_c):
                for i in range(height):
                    for j in range(width):
                        m = min(logit_cap, max(-logit_cap, mask_logits[n, v, i, j]))
                        z[v, r, c, i, j] = conf[r][c] * _sigmoid(m)

    sem = np.full((n_views, height, width), BACKGROUND, dtype=np.int32)
    ins = np.full((n_views, height, width), BACKGROUND, dtype=np.int32)
    for v in range(n_views):
        for i in range(height):
            for j in range(width):
                best_val, best_c, best_q = -1.0, BACKGROUND, BACKGROUND
                for c in range(no_object):
                    for r in range(len(kept)):
                        if z[v, r, c, i, j] > best_val:
                            best_val, best_c, best_q = z[v, r, c, i, j], c, kept[r]
                if kept and best_val >= tau:
                    sem[v, i, j] = best_c
                    ins[v, i, j] = best_q
    return kept, z, sem, ins


def scalar_continuity_loss(depth: np.ndarray, labels: LabelMaps) -> float:
    """Direct double sum over instance pixels of the squared deviation from the neighbor mean."""
    n_views, height, width = labels.dims
    total = 0.0
    for v in range(n_views):
        for i in range(height):
            for j in range(width):
                label = labels.ins[v, i, j]
                if label == BACKGROUND:
                    continue
                neighbors = [depth[v, a, b] for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))
                             if 0 <= a < height and 0 <= b < width and labels.ins[v, a, b] == label]
                if neighbors:
                    total += (depth[v, i, j] - sum(neighbors) / len(neighbors)) ** 2
    return total


def scalar_attention(text: np.ndarray, queries: np.ndarray, layers) -> np.ndarray:
    """Loop-form single-head cross-attention with residual, one prompt at a time."""
    out = np.array(text, dtype=np.float64)
    for layer in layers:
        d_k = layer.w_q.shape[1]
        keys = [q @ layer.w_k for q in queries]
        values = [q @ layer.w_v for q in queries]
        refined = []
        for row in out:
            query = row @ layer.w_q
            weights = _softmax_row([float(query @ key) / math.sqrt(d_k) for key in keys])
            refined.append(row + sum(w * val for w, val in zip(weights, values)))
        out = np.array(refined)
    return out


def scalar_ssim(img: np.ndarray, gt: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    """SSIM evaluated window position by window position."""
    size = window.shape[0]
    height, width = img.shape
    scores = []
    for i in range(height - size + 1):
        for j in range(width - size + 1):
            a = img[i:i + size, j:j + size]
            b = gt[i:i + size, j:j + size]
            mu_a, mu_b = float(np.sum(window * a)), float(np.sum(window * b))
            var_a = float(np.sum(window * a * a)) - mu_a ** 2
            var_b = float(np.sum(window * b * b)) - mu_b ** 2
            cov = float(np.sum(window * a * b)) - mu_a * mu_b
            scores.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(scores))


def scalar_mask_cost(prob: np.ndarray, gt: np.ndarray, class_prob: np.ndarray, classes: Sequence[int],
                     w_class: float, w_bce: float, w_dice: float, smooth: float = 1.0) -> np.ndarray:
    """Matching cost evaluated pair by pair from flattened probabilities."""
    cost = np.zeros((prob.shape[0], gt.shape[0]))
    for n in range(prob.shape[0]):
        for k in range(gt.shape[0]):
            bce = 0.0
            inter = 0.0
            for p, g in zip(prob[n], gt[k]):
                bce -= g * math.log(p) + (1 - g) * math.log(1 - p)
                inter += p * g
            bce /= prob.shape[1]
            dice = (2 * inter + smooth) / (prob[n].sum() + gt[k].sum() + smooth)
            cost[n, k] = -w_class * class_prob[n, classes[k]] + w_bce * bce + w_dice * (1 - dice)
    return cost


def brute_force_ap(scores: Sequence[float], ious: np.ndarray, threshold: float,
                   recall_points: int = 101) -> float:
    """Single-class AP from an explicit PR walk (pred rows already tied to IoUs with gt columns)."""
    order = sorted(range(len(scores)), key=lambda k: -scores[k])
    n_gt = ious.shape[1]
    used = set()
    precisions, recalls = [], []
    tp = 0
    for rank, k in enumerate(order, start=1):
        best, best_iou = None, -1.0
        for g in range(n_gt):
            if g not in used and ious[k, g] >= threshold and ious[k, g] > best_iou:
                best, best_iou = g, ious[k, g]
        if best is not None:
            used.add(best)
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / n_gt)
    total = 0.0
    for step in range(recall_points):
        r = step / (recall_points - 1)
        candidates = [p for p, rc in zip(precisions, recalls) if rc >= r]
        total += max(candidates) if candidates else 0.0
    return total / recall_points
