import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.editing import (EditOp, apply_edit_plan, insert_gaussians, load_edit_plan, recolor_instance,
                         relocate_instance, remove_instance, validate_rigid)
from src.exporters.ply_exporter import export_ply
from src.lifting import segmentation_from_gaussian_labels
from src.scene_core import ClassTaxonomy
from src.synthetic import random_field
from src.utils.exceptions import (ConfigurationException, InvalidTransformException,
                                  MissingChannelException, UnknownInstanceException)

TAXONOMY = ClassTaxonomy(("floor", "chair", "no-object"), (False, True, False))
SEM = np.array([0, 0, 1, 1, 1, -1, 0, 1])
INS = np.array([2, 2, 5, 5, 5, -1, 2, 7])
CHAIR = np.array([2, 3, 4])


@pytest.fixture
def scene(rng):
    return random_field(rng, 8, dims=(2, 2, 2)), segmentation_from_gaussian_labels(SEM, INS, TAXONOMY)


def rigid(angle_deg=90.0, offset=(1.0, -2.0, 0.5)):
    t = np.eye(4)
    t[:3, :3] = Rotation.from_euler("z", angle_deg, degrees=True).as_matrix()
    t[:3, 3] = offset
    return t


def others(count, members):
    keep = np.ones(count, dtype=bool)
    keep[members] = False
    return keep


def test_remove_drops_the_instance(scene):
    field, seg = scene
    edited = remove_instance(field, seg, 5)
    assert edited.count == 5
    assert edited.is_sparse
    np.testing.assert_array_equal(edited.means, field.means[others(8, CHAIR)])


def test_unknown_instance(scene):
    field, seg = scene
    with pytest.raises(UnknownInstanceException):
        remove_instance(field, seg, 42)


def test_relocation_moves_only_the_instance(scene):
    field, seg = scene
    t = rigid()
    moved = relocate_instance(field, seg, 5, t)
    assert moved.count == field.count and moved.dims == field.dims
    np.testing.assert_allclose(moved.means[CHAIR], field.means[CHAIR] @ t[:3, :3].T + t[:3, 3])
    rest = others(8, CHAIR)
    np.testing.assert_array_equal(moved.means[rest], field.means[rest])
    np.testing.assert_array_equal(moved.rotations[rest], field.rotations[rest])
    np.testing.assert_array_equal(moved.scales, field.scales)
    np.testing.assert_array_equal(moved.attrs, field.attrs)


def test_relocation_rotates_covariances(scene):
    field, seg = scene
    rot = rigid()[:3, :3]
    moved = relocate_instance(field, seg, 5, rigid())
    expected = rot @ field.covariances()[CHAIR] @ rot.T
    np.testing.assert_allclose(moved.covariances()[CHAIR], expected, atol=1e-10)


def test_identity_relocation_is_a_no_op(scene):
    field, seg = scene
    assert relocate_instance(field, seg, 5, np.eye(4)) is field


def test_non_rigid_transforms_are_rejected():
    scaled = np.diag([2.0, 1.0, 1.0, 1.0])
    reflected = np.diag([-1.0, 1.0, 1.0, 1.0])
    projective = np.eye(4)
    projective[3, 0] = 0.1
    for t in (scaled, reflected, projective, np.eye(3)):
        with pytest.raises(InvalidTransformException):
            validate_rigid(t)


def test_recolor(scene):
    field, seg = scene
    painted = recolor_instance(field, seg, 5, (1.0, 0.0, 0.0))
    np.testing.assert_array_equal(painted.attrs[CHAIR], np.tile([1.0, 0.0, 0.0], (3, 1)))
    rest = others(8, CHAIR)
    np.testing.assert_array_equal(painted.attrs[rest], field.attrs[rest])
    np.testing.assert_array_equal(painted.means, field.means)


def test_recolor_needs_rgb(rng):
    field = random_field(rng, 8, attr_dim=2, dims=(2, 2, 2))
    with pytest.raises(MissingChannelException):
        recolor_instance(field, segmentation_from_gaussian_labels(SEM, INS, TAXONOMY), 5, (1.0, 0.0, 0.0))


def test_insert_appends_asset(scene, rng):
    field, _ = scene
    asset = random_field(rng, 3)
    merged = insert_gaussians(field, asset)
    assert merged.count == 11 and merged.is_sparse
    np.testing.assert_array_equal(merged.means[8:], asset.means)
    with pytest.raises(MissingChannelException):
        insert_gaussians(field, random_field(rng, 2, attr_dim=1))


def test_plan_keeps_segmentation_in_step(scene):
    field, seg = scene
    plan = [EditOp("remove", 5), EditOp("recolor", 2, color=(0.0, 0.0, 1.0))]
    edited, new_seg = apply_edit_plan(field, seg, plan)
    assert edited.count == 5
    np.testing.assert_array_equal(new_seg.ins_sets[2], [0, 1, 3])
    np.testing.assert_array_equal(new_seg.ins_sets[7], [4])
    assert 5 not in new_seg.ins_sets
    np.testing.assert_array_equal(edited.attrs[[0, 1, 3]], np.tile([0.0, 0.0, 1.0], (3, 1)))
    np.testing.assert_array_equal(edited.attrs[[2, 4]], field.attrs[[5, 7]])


def test_replace_reads_a_ply_asset(scene, rng, tmp_path):
    field, seg = scene
    path = export_ply(random_field(rng, 4), str(tmp_path / "asset.ply"))
    edited, new_seg = apply_edit_plan(field, seg, [EditOp("replace", 5, asset=path)])
    assert edited.count == 8 - 3 + 4
    assert sum(members.size for members in new_seg.ins_sets.values()) == 4


def test_replace_with_custom_loader(scene, rng):
    field, seg = scene
    asset = random_field(rng, 2)
    edited, _ = apply_edit_plan(field, seg, [EditOp("replace", 7, asset="mem://chair")],
                                asset_loader=lambda _: asset)
    np.testing.assert_array_equal(edited.means[-2:], asset.means)


def test_edit_op_validation():
    with pytest.raises(InvalidTransformException):
        EditOp("explode", 1)
    with pytest.raises(InvalidTransformException):
        EditOp("relocate", 1)
    with pytest.raises(InvalidTransformException):
        EditOp("recolor", 1)
    with pytest.raises(InvalidTransformException):
        EditOp("replace", 1)


def test_load_edit_plan(tmp_path):
    path = tmp_path / "plan.yaml"
    path.write_text(
        "edits:\n"
        "  - kind: relocate\n"
        "    ins_id: 3\n"
        "    transform: [[1, 0, 0, 0.5], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]\n"
        "  - kind: recolor\n"
        "    ins_id: 4\n"
        "    color: [1, 1, 0]\n"
    )
    ops = load_edit_plan(str(path))
    assert [(op.kind, op.ins_id) for op in ops] == [("relocate", 3), ("recolor", 4)]
    assert ops[0].transform[0, 3] == 0.5
    assert ops[1].color == (1.0, 1.0, 0.0)


@pytest.mark.parametrize("content", ["- ins_id: 1\n", "kind: remove\n- [\n", "- 3\n"])
def test_malformed_edit_plans(tmp_path, content):
    path = tmp_path / "plan.yaml"
    path.write_text(content)
    with pytest.raises(ConfigurationException):
        load_edit_plan(str(path))


def test_missing_edit_plan(tmp_path):
    with pytest.raises(ConfigurationException):
        load_edit_plan(str(tmp_path / "absent.yaml"))
