"""
Self-test: the engine's numerical checks against brute-force oracles and
synthetic scenes with known answers.
"""

import math
import os
import tempfile
import time
from dataclasses import astuple, dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from colorama import Fore, Style

from .bundle_io import read_bundle, write_bundle
from .config_parser import MetricsConfig
from .exporters.ply_exporter import export_ply, read_ply
from .exporters.report_exporter import save_table
from .lifting import (InstancePrediction, class_query_maps, derive_label_maps, filter_queries, lift_pipeline,
                      lift_to_3d)
from .losses import (LossWeights, continuity_loss, continuity_loss_grad, grad_check, hungarian,
                     mask_loss, photometric_l1, photometric_l1_grad, total_loss)
from .metrics import (average_precision, cross_view_agreement, evaluate_bundle, gaussian_window,
                      instance_ap, instances_from_labels, miou, panoptic_quality, ssim)
from .oracles import (brute_force_ap, brute_force_render, permutation_assignment_cost,
                      scalar_attention, scalar_continuity_loss, scalar_lifting, scalar_mask_cost,
                      scalar_ssim)
from .scene_core import BACKGROUND, CameraModel, ClassTaxonomy, LabelMaps
from .splat_raster import render
from .synthetic import disagreement_scene, oracle_scene, random_field, random_predictions
from .text_match import AttentionLayer, CrossAttentionStack, TextFeatures, attend, text_matching_loss
from .utils.exceptions import BundleFormatException
from .utils.logger import logger
from .view_pairing import Frame, OverlapMatrix, overlap_iou, sample_pairs

PASS, FAIL, ERROR = "PASS", "FAIL", "ERROR"


@dataclass
class CheckResult:
    """Outcome of one self-test check."""
    check_id: str
    description: str
    status: str
    measured: Optional[float]
    expected: str
    detail: str = ""
    seconds: float = 0.0


class SelfTest:
    """Runs every oracle check."""

    def __init__(self, cases: int = 20, seed: int = 0):
        """
        Initialize self-test.

        Args:
            cases: Random cases per randomized check
            seed: Seed of the random generator
        """
        self.cases = cases
        self.seed = seed

    def checks(self) -> List[Tuple[str, str, Callable[[np.random.Generator], Tuple[bool, float, str, str]]]]:
        return [
            ("raster", "rasterizer matches brute-force compositing", self.check_raster),
            ("lifting", "filter / Z / argmax / lift match the scalar loops", self.check_lifting),
            ("ablation", "aggregation fixes cross-view id disagreement", self.check_ablation),
            ("hungarian", "assignment totals match exhaustive permutations", self.check_hungarian),
            ("gradients", "analytic gradients match central differences", self.check_gradients),
            ("loss_constants", "loss weights and uniform text loss", self.check_loss_constants),
            ("mask_cost", "matching cost matches pairwise loops", self.check_mask_cost),
            ("attention", "cross-attention matches per-prompt loops", self.check_attention),
            ("metric_toy", "mIoU / PQ / mAP on a hand-enumerated scene", self.check_metric_toy),
            ("metric_ids", "relabel invariance and split penalty", self.check_metric_ids),
            ("ap", "AP matches an explicit precision-recall walk", self.check_ap),
            ("ssim", "SSIM matches window-by-window evaluation", self.check_ssim),
            ("pairing", "self overlap, half overlap and banded sampling", self.check_pairing),
            ("end_to_end", "perfect logits on the oracle scene", self.check_end_to_end),
            ("formats", "bundle and PLY round trips, corruption codes", self.check_formats),
        ]

    def run(self) -> List[CheckResult]:
        """Run every check; exceptions become ERROR results."""
        results = []
        for check_id, description, check in self.checks():
            rng = np.random.default_rng(self.seed)
            start = time.perf_counter()
            try:
                ok, measured, expected, detail = check(rng)
                status = PASS if ok else FAIL
            except Exception as e:
                logger.error(f"Check {check_id} raised: {str(e)}", exc_info=True)
                ok, measured, expected, detail, status = False, None, "", str(e), ERROR
            elapsed = time.perf_counter() - start
            results.append(CheckResult(check_id, description, status, measured, expected, detail, elapsed))
            logger.info(f"{check_id}: {status} ({elapsed:.2f}s)")
        return results

    def check_raster(self, rng):
        cam = CameraModel(1.0, 1.0, 0.5, 0.5)
        worst = 0.0
        for case in range(self.cases):
            field = random_field(rng, int(rng.integers(1, 65)), (1, 3, 8)[case % 3])
            fast = render(field, cam, (16, 16))
            slow, alpha = brute_force_render(field, cam, (16, 16))
            worst = max(worst, float(np.max(np.abs(fast.attr_image - slow))),
                        float(np.max(np.abs(fast.alpha_image - alpha))))
        return worst < 1e-5, worst, "< 1e-5", f"{self.cases} field(s)"

    def check_lifting(self, rng):
        mismatches = 0
        worst = 0.0
        for _ in range(self.cases):
            n_q, n_c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
            preds = random_predictions(rng, n_q, n_c, (2, 8, 8))
            taxonomy = ClassTaxonomy(tuple(f"c{c}" for c in range(n_c)),
                                     tuple(bool(t) for t in rng.integers(0, 2, n_c)))
            filtered = filter_queries(preds, 0.5)
            maps = class_query_maps(filtered.class_logits, filtered.mask_logits, filtered.kept)
            labels = derive_label_maps(maps, 0.3, taxonomy)
            kept, z, sem, ins = scalar_lifting(preds.mask_logits, preds.class_logits, 0.5, 0.3)
            if list(filtered.kept) != kept:
                mismatches += 1
                continue
            if kept:
                worst = max(worst, float(np.max(np.abs(maps.z - z))))
            field = random_field(rng, 128, 3, (2, 8, 8))
            seg = lift_to_3d(labels, field, taxonomy)
            expected_sets = {int(c): np.flatnonzero(sem.ravel() == c) for c in np.unique(sem) if c != BACKGROUND}
            same_sets = seg.sem_sets.keys() == expected_sets.keys() and all(
                np.array_equal(seg.sem_sets[c], expected_sets[c]) for c in expected_sets)
            if not (np.array_equal(labels.sem, sem) and np.array_equal(labels.ins, ins) and same_sets):
                mismatches += 1
        ok = mismatches == 0 and worst <= 1e-6
        return ok, worst, "0 mismatches, Z within 1e-6", f"{mismatches} mismatching case(s)"

    def check_ablation(self, rng):
        scene = disagreement_scene()
        config = scene.engine_config
        gt = scene.label_maps("gt")
        values = {}
        for aggregate in (False, True):
            labels = lift_pipeline(scene.field, scene.preds, scene.cams, scene.taxonomy, config,
                                   aggregate=aggregate).labels
            values[aggregate] = (cross_view_agreement(labels, scene.field, scene.cams),
                                 panoptic_quality(labels, gt, scene.taxonomy).pq)
        (agree_off, pq_off), (agree_on, pq_on) = values[False], values[True]
        ok = agree_off < 1.0 and agree_on == 1.0 and pq_on > pq_off
        detail = f"agreement {agree_off:.3f} -> {agree_on:.3f}, PQ {pq_off:.3f} -> {pq_on:.3f}"
        return ok, agree_on, "agreement < 1 without, = 1 with; PQ increases", detail

    def check_hungarian(self, rng):
        worst = 0.0
        for _ in range(self.cases):
            cost = rng.uniform(0.0, 10.0, (int(rng.integers(2, 8)), int(rng.integers(2, 8))))
            pairs = hungarian(cost)
            total = sum(cost[r, c] for r, c in pairs)
            if len(pairs) != min(cost.shape):
                return False, None, "min(n, m) pairs", f"got {len(pairs)} pair(s) for {cost.shape}"
            worst = max(worst, abs(total - permutation_assignment_cost(cost)))
        return worst <= 1e-9, worst, "<= 1e-9", f"{self.cases} matrices"

    def check_gradients(self, rng):
        worst = 0.0
        for _ in range(self.cases):
            ins = rng.integers(-1, 2, (1, 6, 6))
            labels = LabelMaps(np.where(ins == BACKGROUND, BACKGROUND, 0), ins)
            depth = rng.uniform(1.0, 3.0, (1, 6, 6))
            worst = max(worst, grad_check(lambda d: continuity_loss(d, labels),
                                          lambda d: continuity_loss_grad(d, labels), depth))
            worst = max(worst, abs(continuity_loss(depth, labels) - scalar_continuity_loss(depth, labels)))
            img = rng.uniform(0.0, 1.0, (3, 6, 6))
            gt = img + rng.choice([-1.0, 1.0], img.shape) * rng.uniform(0.01, 0.5, img.shape)
            worst = max(worst, grad_check(lambda x: photometric_l1(x, gt),
                                          lambda x: photometric_l1_grad(x, gt), img))
        return worst < 1e-4, worst, "< 1e-4", f"{self.cases} instance(s) per loss"

    def check_loss_constants(self, rng):
        weights_ok = astuple(LossWeights()) == (1.0, 0.5, 0.05, 0.05, 1.0)
        total_err = abs(total_loss([1.0] * 5) - 2.6)
        n_q = 100
        onehot = np.zeros((1, n_q))
        onehot[0, int(rng.integers(n_q))] = 1.0
        text_err = abs(text_matching_loss(np.zeros((1, n_q)), onehot) - math.log(n_q))
        ok = weights_ok and total_err < 1e-12 and text_err < 1e-9
        return ok, max(total_err, text_err), "weights (1, .5, .05, .05, 1); ln N_q within 1e-9", \
            f"weights {'ok' if weights_ok else 'differ'}"

    def check_mask_cost(self, rng):
        worst = 0.0
        for _ in range(self.cases):
            n_q, n_c, k = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 3))
            preds = random_predictions(rng, n_q, n_c, (1, 4, 4))
            masks = [rng.integers(0, 2, (1, 4, 4)) for _ in range(k)]
            classes = [int(c) for c in rng.integers(0, n_c - 1, k)]
            result = mask_loss(preds, masks, classes)
            prob = 1.0 / (1.0 + np.exp(-np.clip(preds.mask_logits.reshape(n_q, -1), -30, 30)))
            shifted = np.exp(preds.class_logits - preds.class_logits.max(axis=1, keepdims=True))
            class_prob = shifted / shifted.sum(axis=1, keepdims=True)
            expected = scalar_mask_cost(prob, np.stack([m.reshape(-1) for m in masks]).astype(float),
                                        class_prob, classes, 2.0, 5.0, 5.0)
            worst = max(worst, float(np.max(np.abs(result.cost - expected))))
        return worst < 1e-9, worst, "< 1e-9", f"{self.cases} case(s)"

    def check_attention(self, rng):
        worst = 0.0
        for _ in range(self.cases):
            d_text, d, d_k = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
            layers = tuple(AttentionLayer(rng.normal(size=(d_text, d_k)), rng.normal(size=(d, d_k)),
                                          rng.normal(size=(d, d_text))) for _ in range(2))
            text = rng.normal(size=(3, d_text))
            queries = rng.normal(size=(5, d))
            fast = attend(TextFeatures(text), queries, CrossAttentionStack(layers))
            worst = max(worst, float(np.max(np.abs(fast - scalar_attention(text, queries, layers)))))
        return worst < 1e-9, worst, "< 1e-9", f"{self.cases} stack(s)"

    def check_metric_toy(self, rng):
        taxonomy = ClassTaxonomy(("floor", "chair", "no-object"), (False, True, False))
        gt = LabelMaps([[[0, 0, 1, 1], [0, 0, 1, 1]]], [[[0, 0, 5, 5], [0, 0, 5, 5]]])
        pred = LabelMaps([[[0, 0, 0, 1], [0, 0, 1, 1]]], [[[0, 0, 0, 7], [0, 0, 7, 7]]])
        values = (miou(pred, gt, taxonomy), panoptic_quality(pred, gt, taxonomy).pq,
                  instance_ap(instances_from_labels(pred), instances_from_labels(gt), taxonomy.thing_ids))
        expected = (0.775, 0.775, 0.6)
        worst = max(abs(a - b) for a, b in zip(values, expected))
        return worst < 1e-12, worst, "mIoU 0.775, PQ 0.775, mAP 0.6", \
            "measured " + ", ".join(f"{v:.6f}" for v in values)

    def check_metric_ids(self, rng):
        taxonomy = ClassTaxonomy(("floor", "chair", "no-object"), (False, True, False))
        sem = np.array([[[0, 0, 1, 1], [0, 0, 1, 1]]] * 2)
        gt = LabelMaps(sem, np.where(sem == 1, 5, 0))
        relabeled = LabelMaps(sem, np.where(sem == 1, 9, 3))
        split = LabelMaps(sem, np.where(sem == 1, np.array([7, 8])[:, None, None], 0))

        def score(pred):
            return (panoptic_quality(pred, gt, taxonomy).pq,
                    instance_ap(instances_from_labels(pred), instances_from_labels(gt), taxonomy.thing_ids))

        base, moved, broken = score(gt), score(relabeled), score(split)
        ok = base == moved and all(b < a for a, b in zip(base, broken))
        detail = f"PQ {base[0]:.3f}/{moved[0]:.3f}/{broken[0]:.3f}, mAP {base[1]:.3f}/{moved[1]:.3f}/{broken[1]:.3f}"
        return ok, broken[0], "relabel unchanged, split strictly lower", detail

    def check_ap(self, rng):
        worst = 0.0
        for _ in range(self.cases):
            gts = [InstancePrediction(k, 0, 1.0, rng.random(30) < 0.4) for k in range(int(rng.integers(1, 4)))]
            preds = [InstancePrediction(k, 0, float(rng.random()), rng.random(30) < 0.4)
                     for k in range(int(rng.integers(0, 5)))]
            g = np.array([x.mask for x in gts], dtype=float)
            p = np.array([x.mask for x in preds], dtype=float) if preds else np.zeros((0, g.shape[1]))
            inter = p @ g.T
            union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
            ious = np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)
            for threshold in (0.1, 0.3, 0.5):
                fast = average_precision(preds, gts, threshold)
                slow = brute_force_ap([x.score for x in preds], ious, threshold)
                worst = max(worst, abs(fast - slow))
        return worst < 1e-12, worst, "< 1e-12", f"{self.cases} case(s)"

    def check_ssim(self, rng):
        config = MetricsConfig()
        window = gaussian_window(config.ssim_window, config.ssim_sigma)
        c1, c2 = (config.ssim_k1 * config.psnr_peak) ** 2, (config.ssim_k2 * config.psnr_peak) ** 2
        worst = 0.0
        for _ in range(min(self.cases, 5)):
            img, gt = rng.random((14, 14)), rng.random((14, 14))
            worst = max(worst, abs(ssim(img, gt, config) - scalar_ssim(img, gt, window, c1, c2)))
        identical = ssim(img, img, config)
        return worst < 1e-9 and abs(identical - 1.0) < 1e-12, worst, "< 1e-9, identical = 1", ""

    def check_pairing(self, rng):
        size = 32
        depth = np.full((size, size), 2.0)
        left = Frame("left", depth, CameraModel(1.0, 1.0, 0.5, 0.5))
        pose = np.eye(4)
        pose[0, 3] = (size // 2) * 2.0 / size
        right = Frame("right", depth, CameraModel(1.0, 1.0, 0.5, 0.5, pose))
        self_iou = overlap_iou(left, left)
        half = overlap_iou(left, right)

        n = 8
        iou = np.eye(n)
        rows, cols = np.triu_indices(n, k=1)
        iou[rows, cols] = iou[cols, rows] = rng.random(rows.size)
        matrix = OverlapMatrix(tuple(f"f{k}" for k in range(n)), iou)
        first = sample_pairs(matrix, 0.3, 0.8, 5, seed=7)
        second = sample_pairs(matrix, 0.3, 0.8, 5, seed=7)
        lookup = {f: k for k, f in enumerate(matrix.frame_ids)}
        in_band = all(0.3 <= iou[lookup[a], lookup[b]] <= 0.8 for a, b in first)
        ok = self_iou == 1.0 and abs(half - 0.5) <= 2.0 / size and in_band and first == second
        return ok, half, f"self 1.0, half 0.5 +/- {2.0 / size:.4f}, in band, deterministic", \
            f"self {self_iou:.4f}, half {half:.4f}"

    def check_end_to_end(self, rng):
        scene = oracle_scene()
        config = scene.engine_config
        result = lift_pipeline(scene.field, scene.preds, scene.cams, scene.taxonomy, config, text_ids=[1])
        lifted = scene.with_lift(result, [1])
        context = evaluate_bundle(lifted, scene, "context-2d", config)
        novel = evaluate_bundle(lifted, scene, "novel-3d", config)
        seg_context = min(context.miou_s, context.pq, context.map, context.miou_t)
        seg_novel = min(novel.miou_s, novel.pq, novel.map, novel.miou_t)
        ok = seg_context == 1.0 and seg_novel >= 0.95 and context.absrel < 1e-3
        detail = f"context {seg_context:.4f}, novel {seg_novel:.4f}, AbsRel {context.absrel:.2e}"
        return ok, seg_novel, "context = 1.0, novel >= 0.95, AbsRel < 1e-3", detail

    def check_formats(self, rng):
        scene = oracle_scene(16)
        issues = []
        with tempfile.TemporaryDirectory() as tmp:
            path = write_bundle(scene, os.path.join(tmp, "scene"))
            loaded = read_bundle(path)
            for name, array in scene.tensors.items():
                if loaded.tensors[name].tobytes() != array.tobytes():
                    issues.append(f"{name} changed")

            field = random_field(rng, 10, 3)
            back = read_ply(export_ply(field, os.path.join(tmp, "field.ply")))
            ply_err = max(float(np.max(np.abs(getattr(field, a) - getattr(back, a))))
                          for a in ("means", "opacities", "rotations", "scales", "attrs"))
            if ply_err > 1e-6:
                issues.append(f"PLY error {ply_err:.2e}")

            blob = os.path.join(path, "gaussians.bin")
            with open(blob, 'rb') as f:
                data = f.read()
            for code, corrupted in (("payload_length_mismatch", data[:-4]),
                                    ("unsupported_dtype", data[:7] + (9).to_bytes(8, "little") + data[15:]),
                                    ("bad_magic", b"XXXXXXX" + data[7:])):
                with open(blob, 'wb') as f:
                    f.write(corrupted)
                try:
                    read_bundle(path)
                    issues.append(f"{code} not raised")
                except BundleFormatException as e:
                    if e.code != code:
                        issues.append(f"expected {code}, got {e.code}")
        return not issues, ply_err, "bit-exact bundle, PLY within 1e-6, distinct codes", "; ".join(issues)


def save_results_to_csv(results: List[CheckResult], output_path: str) -> str:
    """Save self-test results to CSV."""
    df = pd.DataFrame([{
        'check_id': r.check_id,
        'description': r.description,
        'status': r.status,
        'measured': r.measured,
        'expected': r.expected,
        'detail': r.detail,
        'seconds': round(r.seconds, 3),
    } for r in results])
    save_table(df, output_path)
    logger.info(f"Results saved to: {output_path}")
    return output_path


def print_summary(results: List[CheckResult]):
    """Print summary of self-test results."""
    total = len(results)
    passed = sum(1 for r in results if r.status == PASS)
    failed = sum(1 for r in results if r.status == FAIL)
    errors = sum(1 for r in results if r.status == ERROR)

    print("\n" + "=" * 60)
    print("SELF-TEST SUMMARY")
    print("=" * 60)
    print(f"Total Checks:      {total}")
    print(f"{Fore.GREEN}✓ Passed:          {passed} ({passed/total*100:.1f}%){Style.RESET_ALL}")
    print(f"{Fore.RED}✗ Failed:          {failed} ({failed/total*100:.1f}%){Style.RESET_ALL}")
    print(f"{Fore.YELLOW}⚠ Errors:          {errors} ({errors/total*100:.1f}%){Style.RESET_ALL}")
    print("=" * 60)

    if failed > 0:
        print("\nFailed Checks:")
        for r in results:
            if r.status == FAIL:
                print(f"  {Fore.RED}✗{Style.RESET_ALL} {r.check_id}: {r.description}")
                print(f"    Measured: {r.measured} | Expected: {r.expected} | {r.detail}")

    if errors > 0:
        print("\nErrors:")
        for r in results:
            if r.status == ERROR:
                print(f"  {Fore.YELLOW}⚠{Style.RESET_ALL} {r.check_id}: {r.description}")
                print(f"    Error: {r.detail}")

    print()
