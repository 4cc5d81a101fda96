import os

import numpy as np
import pandas as pd
import pytest

from src.bundle_io import read_bundle
from src.exporters.png_exporter import read_id_map
from src.pipeline import FieldEngine
from src.scene_core import CameraModel
from src.synthetic import SCENE_SIZE
from src.utils.exceptions import ConfigurationException, DimensionMismatchException, MissingChannelException

GAUSSIANS = 2 * SCENE_SIZE * SCENE_SIZE
CHAIR_GAUSSIANS = 2 * 20 * 10


@pytest.fixture(scope="module")
def lifted_dir(oracle_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("lift"))
    return FieldEngine().run_lift(oracle_dir, out).outputs["bundle"]


def test_invalid_overrides_fail_early():
    with pytest.raises(ConfigurationException):
        FieldEngine({"lifting": {"tau_c": 2.0}})


def test_overrides_sit_on_top_of_the_bundle_snapshot(oracle):
    config = FieldEngine({"raster": {"workers": 2}}).config_for(oracle)
    assert config.raster.workers == 2
    assert config.scene.scale_min == 1e-4


def test_lift(oracle, oracle_dir, tmp_path):
    result = FieldEngine().run_lift(oracle_dir, str(tmp_path))
    assert result.summary["kept"] == [0, 1, 2]
    assert result.summary["instances"] == 3
    assert result.summary["text_ids"] == [1]
    assert result.summary["agreement"] == pytest.approx(1.0)
    np.testing.assert_array_equal(read_id_map(result.outputs["sem_0"]), oracle.get("gt_sem")[0])
    np.testing.assert_array_equal(read_id_map(result.outputs["ins_1"]), oracle.get("gt_ins")[1])
    assert os.path.exists(tmp_path / "view0_sem_preview.png")

    lifted = read_bundle(result.outputs["bundle"])
    np.testing.assert_array_equal(lifted.get("pred_ins"), oracle.get("gt_ins"))
    assert lifted.text_ids == (1,)
    segments = pd.read_csv(result.outputs["segments"])
    text_row = segments[segments["kind"] == "text"].iloc[0]
    assert text_row["id"] == 1
    assert text_row["gaussians"] == CHAIR_GAUSSIANS


def test_lift_aggregation_switch(disagreement_dir, tmp_path):
    engine = FieldEngine()
    plain = engine.run_lift(disagreement_dir, str(tmp_path / "plain"), aggregate=False)
    fused = engine.run_lift(disagreement_dir, str(tmp_path / "fused"), aggregate=True)
    assert plain.summary["agreement"] < 1.0
    assert fused.summary["agreement"] == 1.0


def test_render_context_view(oracle_dir, tmp_path):
    result = FieldEngine().run_render(oracle_dir, str(tmp_path), view=1)
    assert sorted(result.outputs) == ["alpha", "depth", "rgb"]
    assert result.summary["camera"] == "view1"
    assert result.summary["coverage"] > 0.9


def test_render_target_camera_with_lifted_ids(lifted_dir, oracle, tmp_path):
    result = FieldEngine().run_render(lifted_dir, str(tmp_path), target=0)
    assert result.summary["camera"] == "target0"
    sem = read_id_map(result.outputs["sem"])
    assert np.mean(sem == oracle.get("target_sem")[0]) > 0.95


def test_render_explicit_camera_and_size(oracle_dir, tmp_path):
    result = FieldEngine().run_render(oracle_dir, str(tmp_path), camera=CameraModel(1.0, 1.0, 0.5, 0.5),
                                      size=(24, 32))
    assert result.summary["size"] == [24, 32]
    with pytest.raises(DimensionMismatchException):
        FieldEngine().run_render(oracle_dir, str(tmp_path), target=3)
    with pytest.raises(DimensionMismatchException):
        FieldEngine().run_render(oracle_dir, str(tmp_path), view=2)


def test_metrics(lifted_dir, oracle_dir, tmp_path):
    result = FieldEngine().run_metrics(lifted_dir, oracle_dir, str(tmp_path), require=["segmentation", "text"])
    assert result.summary["miou_s"] == 1.0
    assert result.summary["miou_t"] == 1.0
    assert os.path.basename(result.outputs["text"]) == "eval_context_report.txt"
    novel = FieldEngine().run_metrics(lifted_dir, oracle_dir, str(tmp_path), mode="novel")
    assert novel.summary["miou_s"] >= 0.95
    assert "eval_novel_report.csv" in os.listdir(tmp_path)


def test_pair(oracle_dir, tmp_path):
    engine = FieldEngine()
    result = engine.run_pair([oracle_dir], str(tmp_path), lo=0.5, hi=1.0, count=2, seed=3)
    assert result.summary["frames"] == 3
    assert result.summary["pairs"] == 2
    matrix = pd.read_csv(result.outputs["matrix"], index_col=0)
    assert list(matrix.index) == ["oracle:v0", "oracle:v1", "oracle:t0"]
    assert matrix.loc["oracle:v0", "oracle:v1"] == pytest.approx(44 / 48, abs=2 / 48)
    again = engine.run_pair([oracle_dir], str(tmp_path / "again"), lo=0.5, hi=1.0, count=2, seed=3)
    assert pd.read_csv(again.outputs["pairs"]).equals(pd.read_csv(result.outputs["pairs"]))


def test_pair_with_empty_band(oracle_dir, tmp_path):
    result = FieldEngine().run_pair([oracle_dir], str(tmp_path), count=5)
    assert result.summary["pairs"] == 0
    assert list(pd.read_csv(result.outputs["pairs"]).columns) == ["frame_a", "frame_b", "iou"]


def test_edit_removes_the_chair(oracle_dir, tmp_path):
    plan = tmp_path / "plan.yaml"
    plan.write_text("edits:\n  - kind: remove\n    ins_id: 1\n")
    result = FieldEngine().run_edit(oracle_dir, str(plan), str(tmp_path / "out"))
    assert result.summary == {"edits": 1, "gaussians": GAUSSIANS - CHAIR_GAUSSIANS, "sparse": True}
    edited = read_bundle(result.outputs["bundle"])
    assert edited.dims is None
    assert 1 not in edited.segmentation().ins_sets
    assert os.path.exists(result.outputs["ply"])


def test_edit_recolor_keeps_alignment(lifted_dir, tmp_path):
    plan = tmp_path / "plan.yaml"
    plan.write_text("- kind: recolor\n  ins_id: 2\n  color: [0, 1, 0]\n")
    result = FieldEngine().run_edit(lifted_dir, str(plan), str(tmp_path / "out"))
    assert result.summary["sparse"] is False
    edited = read_bundle(result.outputs["bundle"])
    table = edited.segmentation().ins_sets[2]
    np.testing.assert_array_equal(edited.field.attrs[table], np.tile([0.0, 1.0, 0.0], (table.size, 1)))


def test_loss(oracle_dir, tmp_path):
    result = FieldEngine().run_loss(oracle_dir, str(tmp_path))
    assert result.summary["continuity"] == pytest.approx(0.0, abs=1e-8)
    assert 0.0 < result.summary["text"] < np.log(5)
    assert result.summary["total"] >= result.summary["text"]
    table = pd.read_csv(result.outputs["losses"])
    assert table["term"].tolist() == ["photometric", "perceptual", "mask", "continuity", "text", "total"]


def test_loss_needs_alignment_and_a_valid_plugin(oracle_dir, tmp_path):
    with pytest.raises(ConfigurationException):
        FieldEngine().run_loss(oracle_dir, str(tmp_path), perceptual="no_such_module:lpips")
    sparse_dir = FieldEngine().run_edit(oracle_dir, _remove_plan(tmp_path), str(tmp_path / "edit")).outputs["bundle"]
    with pytest.raises(MissingChannelException):
        FieldEngine().run_loss(sparse_dir, str(tmp_path))


def _remove_plan(tmp_path) -> str:
    plan = tmp_path / "remove.yaml"
    plan.write_text("- kind: remove\n  ins_id: 2\n")
    return str(plan)
