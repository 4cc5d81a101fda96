import os
import shutil

import numpy as np
import pytest
import yaml

from src.bundle_io import (MAGIC, MANIFEST_NAME, SceneBundle, decode_tensor, encode_tensor, read_bundle,
                           read_tensor, write_bundle, write_tensor)
from src.lifting import lift_pipeline
from src.scene_core import GaussianField
from src.synthetic import TAXONOMY, random_field
from src.utils.exceptions import BundleFormatException


def code_of(excinfo) -> str:
    return excinfo.value.code


def test_round_trip_is_bit_exact(oracle, oracle_dir):
    loaded = read_bundle(oracle_dir)
    assert loaded.tensors.keys() == oracle.tensors.keys()
    for name, array in oracle.tensors.items():
        assert loaded.tensors[name].dtype == array.dtype, name
        np.testing.assert_array_equal(loaded.tensors[name], array)
    assert loaded.dims == oracle.dims
    assert loaded.taxonomy == oracle.taxonomy
    assert len(loaded.target_cams) == 1
    assert loaded.config == oracle.config


def test_rewriting_a_loaded_bundle_reproduces_every_blob(oracle_dir, tmp_path):
    copy = write_bundle(read_bundle(oracle_dir), str(tmp_path / "copy"))
    for name in os.listdir(oracle_dir):
        if name.endswith(".bin"):
            with open(os.path.join(oracle_dir, name), "rb") as a, open(os.path.join(copy, name), "rb") as b:
                assert a.read() == b.read(), name


def test_stored_dtypes():
    assert decode_tensor(encode_tensor(np.array([True, False]))).dtype == np.uint8
    assert decode_tensor(encode_tensor(np.arange(3, dtype=np.int64))).dtype == np.int32
    with pytest.raises(BundleFormatException) as exc:
        encode_tensor(np.zeros(2, dtype=np.complex128))
    assert code_of(exc) == "unsupported_dtype"


def test_blob_header_layout():
    blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert blob.startswith(MAGIC)
    assert len(blob) == len(MAGIC) + 8 * 4 + 6 * 4


@pytest.mark.parametrize("mutate, code", [
    (lambda b: b"XXXXXX\0" + b[7:], "bad_magic"),
    (lambda b: b[:-4], "payload_length_mismatch"),
    (lambda b: b + b"\0", "payload_length_mismatch"),
    (lambda b: b[:10], "payload_length_mismatch"),
    (lambda b: MAGIC + np.array([9], dtype="<u8").tobytes() + b[15:], "unsupported_dtype"),
])
def test_corrupted_blobs(mutate, code):
    blob = encode_tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(BundleFormatException) as exc:
        decode_tensor(mutate(blob))
    assert code_of(exc) == code


def test_tensor_files(tmp_path):
    path = write_tensor(np.arange(6).reshape(2, 3), str(tmp_path / "t.bin"))
    np.testing.assert_array_equal(read_tensor(path), np.arange(6).reshape(2, 3))
    assert os.listdir(tmp_path) == ["t.bin"]
    with pytest.raises(BundleFormatException) as exc:
        read_tensor(str(tmp_path / "absent.bin"))
    assert code_of(exc) == "missing_tensor"


@pytest.fixture
def bundle_copy(oracle_dir, tmp_path):
    return shutil.copytree(oracle_dir, str(tmp_path / "bundle"))


def edit_manifest(path, change):
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path) as f:
        manifest = yaml.safe_load(f)
    change(manifest)
    with open(manifest_path, "w") as f:
        yaml.safe_dump(manifest, f)


def test_missing_or_malformed_manifest(bundle_copy, tmp_path):
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(str(tmp_path / "nowhere"))
    assert code_of(exc) == "manifest_parse"
    with open(os.path.join(bundle_copy, MANIFEST_NAME), "w") as f:
        f.write("tensors: [unclosed\n")
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(bundle_copy)
    assert code_of(exc) == "manifest_parse"


def test_manifest_without_gaussians(bundle_copy):
    edit_manifest(bundle_copy, lambda m: m["tensors"].pop("gaussians"))
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(bundle_copy)
    assert code_of(exc) == "missing_tensor"


def test_manifest_shape_must_match_blob(bundle_copy):
    def shrink(manifest):
        manifest["tensors"]["gt_sem"]["shape"] = [1, 1, 1]

    edit_manifest(bundle_copy, shrink)
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(bundle_copy)
    assert code_of(exc) == "shape_mismatch"


def test_corrupted_blob_in_bundle(bundle_copy):
    with open(os.path.join(bundle_copy, "class_logits.bin"), "r+b") as f:
        f.write(b"NOTSIU")
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(bundle_copy)
    assert code_of(exc) == "bad_magic"


def test_missing_blob_in_bundle(bundle_copy):
    os.remove(os.path.join(bundle_copy, "gt_ins.bin"))
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(bundle_copy)
    assert code_of(exc) == "missing_tensor"


def test_invalid_scene_is_rejected_unless_validation_is_off(rng, tmp_path):
    field = random_field(rng, 4)
    broken = GaussianField(field.means, [0.5, 1.5, 0.5, 0.5], field.rotations, field.scales, field.attrs)
    path = write_bundle(SceneBundle.create(broken, [], TAXONOMY), str(tmp_path / "broken"))
    with pytest.raises(BundleFormatException) as exc:
        read_bundle(path)
    assert code_of(exc) == "invalid_bundle"
    assert read_bundle(path, validate=False).field.count == 4


def test_write_replaces_existing_bundle(oracle, disagreement, tmp_path):
    path = str(tmp_path / "scene")
    write_bundle(oracle, path)
    write_bundle(disagreement, path)
    assert "target_sem.bin" not in os.listdir(path)
    assert [name for name in os.listdir(tmp_path) if name.startswith(".")] == []


def test_replaced_bundle_removed_only_after_swap(oracle, disagreement, tmp_path, monkeypatch):
    path = str(tmp_path / "scene")
    write_bundle(disagreement, path)
    real_rmtree = shutil.rmtree
    seen = []

    def recording_rmtree(target, *args, **kwargs):
        seen.append((os.path.basename(target), os.path.exists(os.path.join(path, "target_sem.bin"))))
        real_rmtree(target, *args, **kwargs)

    monkeypatch.setattr(shutil, "rmtree", recording_rmtree)
    write_bundle(oracle, path)
    assert len(seen) == 1
    name, new_in_place = seen[0]
    assert name.startswith(".scene.old.")
    assert new_in_place
    assert read_bundle(path).get("target_sem") is not None


def test_failed_swap_restores_previous_bundle(oracle, disagreement, tmp_path, monkeypatch):
    path = str(tmp_path / "scene")
    write_bundle(oracle, path)
    real_rename = os.rename

    def failing_rename(src, dst):
        if dst == path and ".old." not in os.path.basename(src):
            raise OSError("no space left on device")
        real_rename(src, dst)

    with monkeypatch.context() as patched:
        patched.setattr(os, "rename", failing_rename)
        with pytest.raises(BundleFormatException) as exc:
            write_bundle(disagreement, path)
    assert exc.value.code == "invalid_bundle"
    assert read_bundle(path).get("target_sem") is not None
    assert [name for name in os.listdir(tmp_path) if name.startswith(".")] == []


def test_lift_and_sparse_field_channels(oracle):
    assert oracle.label_maps("pred") is None
    result = lift_pipeline(oracle.field, oracle.preds, oracle.cams, oracle.taxonomy, oracle.engine_config)
    lifted = oracle.with_lift(result, text_ids=[1])
    assert lifted.label_maps("pred").kept == result.labels.kept
    assert sorted(lifted.segmentation().ins_sets) == [0, 1, 2]
    assert lifted.text_ids == (1,)

    keep = np.arange(oracle.field.count) % 2 == 0
    sparse = lifted.with_field(oracle.field.select(keep))
    assert sparse.preds is None
    assert sparse.dims is None
    for name in ("mask_logits", "class_logits", "pred_sem", "pred_ins", "seg_sem"):
        assert sparse.get(name) is None
    assert sparse.get("gt_sem") is not None
