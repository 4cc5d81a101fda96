"""
Pipeline orchestration behind the CLI subcommands.

Each run_* method reads its inputs, runs one engine pipeline and writes its
outputs atomically into an output directory.
"""

import copy
import os
from dataclasses import astuple, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .bundle_io import SceneBundle, read_bundle, write_bundle
from .config_parser import EngineConfig, config_from_dict
from .editing import apply_edit_plan, load_edit_plan
from .exporters.png_exporter import save_depth, save_id_map, save_matrix_image, save_palette_preview, save_rgb
from .exporters.ply_exporter import export_ply, read_ply
from .exporters.report_exporter import save_report, save_table
from .lifting import lift_pipeline
from .losses import evaluate_losses, load_perceptual_plugin, total_loss
from .metrics import cross_view_agreement, evaluate_bundle
from .scene_core import CameraModel
from .splat_raster import render, render_onehot_ids
from .text_match import gt_assignment_from_masks, select_query, text_matching_loss
from .utils.exceptions import DimensionMismatchException, MissingChannelException
from .utils.logger import log_step, logger
from .view_pairing import Frame, overlap_matrix, sample_pairs


@dataclass
class PipelineResult:
    """Outcome of one pipeline run."""
    command: str
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)


def _merge(base: Dict[str, Any], top: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class FieldEngine:
    """Runs engine pipelines on scene bundles."""

    def __init__(self, overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize engine.

        Args:
            overrides: Nested config values (file, environment and flags) applied
                on top of each bundle's config snapshot
        """
        self.overrides = overrides or {}
        config_from_dict(self.overrides)

    def config_for(self, bundle: Optional[SceneBundle] = None) -> EngineConfig:
        """Bundle snapshot with the engine overrides on top."""
        snapshot = bundle.config if bundle is not None else {}
        return config_from_dict(_merge(snapshot or {}, self.overrides))

    def _lift(self, bundle: SceneBundle, config: EngineConfig, aggregate: bool = True):
        if bundle.preds is None:
            raise MissingChannelException("Bundle has no mask_logits / class_logits to lift")
        text_ids: List[int] = []
        text, stack = bundle.text_features(), bundle.attention_stack()
        if text is not None and stack is not None and bundle.preds.queries is not None:
            ids, _ = select_query(text, bundle.preds.queries, stack)
            text_ids = [int(t) for t in ids]
        result = lift_pipeline(bundle.field, bundle.preds, bundle.cams, bundle.taxonomy, config,
                               aggregate=aggregate, text_ids=text_ids)
        return result, text_ids

    def run_lift(self, bundle_path: str, output_dir: str, aggregate: bool = True) -> PipelineResult:
        """
        Lift 2D predictions onto the Gaussians.

        Writes the lifted bundle (pred_sem/pred_ins/seg_sem/seg_ins), per-view id
        maps with previews and a segment table.
        """
        bundle = read_bundle(bundle_path)
        config = self.config_for(bundle)
        with log_step(f"Lifting {os.path.basename(os.path.normpath(bundle_path))}"):
            result, text_ids = self._lift(bundle, config, aggregate)
        lifted = replace(bundle.with_lift(result, text_ids), config=config.to_dict())

        os.makedirs(output_dir, exist_ok=True)
        outputs = {"bundle": write_bundle(lifted, os.path.join(output_dir, "lifted"))}
        for v in range(result.labels.dims[0]):
            for name, maps in (("sem", result.labels.sem), ("ins", result.labels.ins)):
                outputs[f"{name}_{v}"] = save_id_map(maps[v], os.path.join(output_dir, f"view{v}_{name}.png"))
                save_palette_preview(maps[v], os.path.join(output_dir, f"view{v}_{name}_preview.png"))

        seg = result.segmentation
        rows = [{"kind": "semantic", "id": c, "class": bundle.taxonomy.names[c], "gaussians": len(m)}
                for c, m in sorted(seg.sem_sets.items())]
        rows += [{"kind": "instance", "id": q, "class": "", "gaussians": len(m)}
                 for q, m in sorted(seg.ins_sets.items())]
        rows += [{"kind": "text", "id": text_ids[p], "class": f"prompt {p}", "gaussians": len(m)}
                 for p, m in sorted(result.text_sets.items())]
        outputs["segments"] = save_table(rows, os.path.join(output_dir, "segments.csv"))

        agreement = cross_view_agreement(result.labels, bundle.field, bundle.cams,
                                         config.pairing.depth_tolerance)
        summary = {
            "kept": list(result.labels.kept),
            "instances": len(seg.ins_sets),
            "text_ids": text_ids,
            "aggregate": aggregate,
            "agreement": agreement,
        }
        logger.info(f"Lift finished: {summary}")
        return PipelineResult("lift", outputs, summary)

    def _camera(self, bundle: SceneBundle, view: Optional[int], target: Optional[int],
                camera: Optional[CameraModel]) -> Tuple[CameraModel, str]:
        if camera is not None:
            return camera, "camera"
        if target is not None:
            if not 0 <= target < len(bundle.target_cams):
                raise DimensionMismatchException(
                    f"Target camera {target} out of range (bundle has {len(bundle.target_cams)})"
                )
            return bundle.target_cams[target], f"target{target}"
        view = 0 if view is None else view
        if not 0 <= view < len(bundle.cams):
            raise DimensionMismatchException(f"View {view} out of range (bundle has {len(bundle.cams)})")
        return bundle.cams[view], f"view{view}"

    def run_render(self, bundle_path: str, output_dir: str, view: Optional[int] = None,
                   target: Optional[int] = None, camera: Optional[CameraModel] = None,
                   size: Optional[Tuple[int, int]] = None) -> PipelineResult:
        """
        Rasterize a bundle into one camera: RGB, depth, alpha and lifted id maps.
        """
        bundle = read_bundle(bundle_path)
        config = self.config_for(bundle)
        cam, tag = self._camera(bundle, view, target, camera)
        if size is None:
            if bundle.dims is None:
                raise MissingChannelException("Sparse bundles need an explicit --size")
            size = tuple(bundle.dims[1:])

        with log_step(f"Rendering {tag} at {size[0]}x{size[1]}"):
            out = render(bundle.field, cam, size, config.raster)
        os.makedirs(output_dir, exist_ok=True)
        outputs = {}
        if bundle.field.attr_dim == 3:
            outputs["rgb"] = save_rgb(out.attr_image, os.path.join(output_dir, f"{tag}_rgb.png"))
        else:
            logger.warning(f"Attributes have {bundle.field.attr_dim} channel(s); RGB output skipped")
        depth = np.where(out.alpha_image > 0, out.depth_image, 0.0)
        outputs["depth"] = save_depth(depth, os.path.join(output_dir, f"{tag}_depth.png"))
        outputs["alpha"] = save_matrix_image(out.alpha_image, os.path.join(output_dir, f"{tag}_alpha.png"))

        seg = bundle.segmentation()
        if seg is not None:
            seg_sem, seg_ins = seg.per_gaussian(bundle.field.count)
            for name, ids in (("sem", seg_sem), ("ins", seg_ins)):
                id_map = render_onehot_ids(bundle.field, ids, cam, size, config.raster)
                outputs[name] = save_id_map(id_map, os.path.join(output_dir, f"{tag}_{name}.png"))
                save_palette_preview(id_map, os.path.join(output_dir, f"{tag}_{name}_preview.png"))

        summary = {"camera": tag, "size": list(size), "coverage": float(np.mean(out.alpha_image))}
        logger.info(f"Render finished: {summary}")
        return PipelineResult("render", outputs, summary)

    def run_metrics(self, pred_path: str, gt_path: str, output_dir: str, mode: str = "context",
                    require: Sequence[str] = ()) -> PipelineResult:
        """Evaluate a prediction bundle against a ground-truth bundle."""
        pred = read_bundle(pred_path)
        gt = read_bundle(gt_path)
        with log_step(f"Evaluating {mode} metrics"):
            report = evaluate_bundle(pred, gt, mode, self.config_for(pred), require)
        outputs = save_report(report, output_dir, prefix=f"eval_{report.mode}")
        return PipelineResult("metrics", outputs, report.scalars())

    def run_pair(self, bundle_paths: Sequence[str], output_dir: str, lo: Optional[float] = None,
                 hi: Optional[float] = None, count: int = 1, seed: int = 0) -> PipelineResult:
        """
        Overlap matrix over every depth frame of the given bundles plus sampled pairs.

        Context views use gt_depth with the bundle cameras; target views use
        target_depth with the target cameras.
        """
        frames: List[Frame] = []
        config = self.config_for()
        for path in bundle_paths:
            bundle = read_bundle(path)
            name = os.path.basename(os.path.normpath(path))
            for key, cams, tag in (("gt_depth", bundle.cams, "v"), ("target_depth", bundle.target_cams, "t")):
                depth = bundle.get(key)
                if depth is None:
                    continue
                if len(depth) != len(cams):
                    raise DimensionMismatchException(f"{name}: {len(depth)} {key} map(s) for {len(cams)} camera(s)")
                frames += [Frame(f"{name}:{tag}{k}", depth[k], cams[k]) for k in range(len(cams))]
        if not frames:
            raise MissingChannelException("No depth frames found (need gt_depth or target_depth)")

        lo = config.pairing.band_lo if lo is None else lo
        hi = config.pairing.band_hi if hi is None else hi
        with log_step(f"Overlap matrix over {len(frames)} frame(s)"):
            matrix = overlap_matrix(frames, config.pairing, config.raster.workers)
        pairs = sample_pairs(matrix, lo, hi, count, seed)

        os.makedirs(output_dir, exist_ok=True)
        lookup = {fid: k for k, fid in enumerate(matrix.frame_ids)}
        outputs = {
            "matrix": save_table(matrix.to_frame(), os.path.join(output_dir, "overlap_matrix.csv"), index=True),
            "figure": save_matrix_image(matrix.iou, os.path.join(output_dir, "overlap_matrix.png")),
            "pairs": save_table(
                pd.DataFrame([{"frame_a": a, "frame_b": b, "iou": matrix.iou[lookup[a], lookup[b]]}
                              for a, b in pairs], columns=["frame_a", "frame_b", "iou"]),
                os.path.join(output_dir, "pairs.csv"),
            ),
        }
        summary = {"frames": len(frames), "pairs": len(pairs), "band": [lo, hi], "seed": seed}
        logger.info(f"Pairing finished: {summary}")
        return PipelineResult("pair", outputs, summary)

    def run_edit(self, bundle_path: str, plan_path: str, output_dir: str) -> PipelineResult:
        """
        Apply an edit plan to a lifted bundle (lifting first when it is not lifted yet).

        Asset paths in the plan resolve relative to the plan file.
        """
        bundle = read_bundle(bundle_path)
        seg = bundle.segmentation()
        if seg is None:
            result, _ = self._lift(bundle, self.config_for(bundle))
            seg = result.segmentation
        ops = load_edit_plan(plan_path)
        plan_dir = os.path.dirname(os.path.abspath(plan_path))

        def load_asset(path: str):
            return read_ply(path if os.path.isabs(path) else os.path.join(plan_dir, path))

        with log_step(f"Applying {len(ops)} edit(s)"):
            field, seg = apply_edit_plan(bundle.field, seg, ops, load_asset)
        edited = bundle.with_field(field, seg)
        os.makedirs(output_dir, exist_ok=True)
        outputs = {"bundle": write_bundle(edited, os.path.join(output_dir, "edited"))}
        if field.attr_dim == 3:
            outputs["ply"] = export_ply(field, os.path.join(output_dir, "edited.ply"))
        summary = {"edits": len(ops), "gaussians": field.count, "sparse": field.is_sparse}
        logger.info(f"Edit finished: {summary}")
        return PipelineResult("edit", outputs, summary)

    def _text_term(self, bundle: SceneBundle, gt: SceneBundle) -> float:
        text, stack, gt_text = bundle.text_features(), bundle.attention_stack(), gt.get("gt_text_masks")
        if text is None or stack is None or gt_text is None or bundle.preds is None \
                or bundle.preds.queries is None:
            logger.info("Skipping text term: missing text features, attention weights or text masks")
            return 0.0
        _, scores = select_query(text, bundle.preds.queries, stack)
        config = self.config_for(bundle).losses
        onehot = gt_assignment_from_masks(bundle.preds.mask_logits >= 0.0, list(gt_text),
                                          config.match_cost, config.logit_cap, config.dice_smooth)
        return text_matching_loss(scores, onehot)

    def run_loss(self, bundle_path: str, output_dir: str, gt_path: Optional[str] = None,
                 perceptual: Optional[str] = None) -> PipelineResult:
        """
        Every training-loss term for a bundle against its (or a separate) ground truth.

        Args:
            bundle_path: Prediction bundle
            output_dir: Output directory
            gt_path: Ground-truth bundle (default: the prediction bundle itself)
            perceptual: Optional "module:function" perceptual plugin
        """
        bundle = read_bundle(bundle_path)
        gt = read_bundle(gt_path) if gt_path else bundle
        config = self.config_for(bundle)
        if bundle.dims is None:
            raise MissingChannelException("Loss evaluation needs a pixel-aligned bundle")
        gt_images = gt.get("images")
        if gt_images is None:
            raise MissingChannelException("Loss evaluation needs gt 'images'")

        size = tuple(bundle.dims[1:])
        with log_step(f"Rendering {len(bundle.cams)} context view(s)"):
            renders = [render(bundle.field, cam, size, config.raster) for cam in bundle.cams]
        plugin = load_perceptual_plugin(perceptual) if perceptual else None
        losses = config.losses
        components = evaluate_losses(
            [r.attr_image for r in renders], list(gt_images), bundle.preds, gt.label_maps("gt"),
            np.stack([r.depth_image for r in renders]), self._text_term(bundle, gt), plugin,
            losses.match_cost, losses.logit_cap, losses.dice_smooth,
        )
        total = total_loss(components, losses.weights)

        os.makedirs(output_dir, exist_ok=True)
        names = ("photometric", "perceptual", "mask", "continuity", "text")
        rows = [{"term": n, "value": v, "weight": w}
                for n, v, w in zip(names, components.as_array(), astuple(losses.weights))]
        rows.append({"term": "total", "value": total, "weight": np.nan})
        outputs = {"losses": save_table(rows, os.path.join(output_dir, "loss_components.csv"))}
        summary = dict(zip(names, components.as_array().tolist()))
        summary["total"] = total
        logger.info(f"Loss finished: total {total:.6f}")
        return PipelineResult("loss", outputs, summary)

