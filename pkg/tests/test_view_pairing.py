import numpy as np
import pytest

from src.config_parser import PairingConfig
from src.scene_core import CameraModel
from src.view_pairing import (Frame, OverlapMatrix, directed_iou, overlap_iou, overlap_matrix,
                              reproject, sample_pairs, unproject)
from src.utils.exceptions import DimensionMismatchException

SIZE = 32


def camera_at(x: float) -> CameraModel:
    pose = np.eye(4)
    pose[0, 3] = x
    return CameraModel(1.0, 1.0, 0.5, 0.5, pose)


def plane_frame(frame_id: str, shift_px: int, depth: float = 2.0) -> Frame:
    # a shift of s pixels on the plane at depth 2 is a baseline of s / 16 at SIZE 32
    return Frame(frame_id, np.full((SIZE, SIZE), depth), camera_at(shift_px * depth / SIZE))


def test_unproject_then_reproject_returns_pixel_centers(rng):
    cam = camera_at(0.3)
    depth = rng.uniform(1.0, 4.0, (6, 5))
    points = unproject(depth, cam).reshape(-1, 3)
    pixels, z = reproject(points, cam, (6, 5))
    ys, xs = np.meshgrid(np.arange(6), np.arange(5), indexing="ij")
    np.testing.assert_allclose(pixels, np.stack([xs.ravel(), ys.ravel()], axis=1), atol=1e-9)
    np.testing.assert_allclose(z, depth.ravel())


def test_invalid_depth_unprojects_to_nan():
    depth = np.array([[2.0, 0.0], [np.nan, -1.0]])
    points = unproject(depth, camera_at(0.0))
    assert np.all(np.isfinite(points[0, 0]))
    assert np.isnan(points[0, 1]).all() and np.isnan(points[1, 0]).all() and np.isnan(points[1, 1]).all()
    with pytest.raises(DimensionMismatchException):
        unproject(np.ones((1, 2, 2)), camera_at(0.0))


def test_points_behind_camera_get_nan_pixels():
    pixels, depth = reproject(np.array([[0.0, 0.0, -2.0]]), camera_at(0.0), (4, 4))
    assert depth[0] == -2.0
    assert np.isnan(pixels).all()


def test_self_overlap_is_one():
    frame = plane_frame("a", 0)
    assert overlap_iou(frame, frame) == 1.0


def test_half_shift_gives_half_overlap():
    a, b = plane_frame("a", 0), plane_frame("b", SIZE // 2)
    assert overlap_iou(a, b) == pytest.approx(0.5, abs=2 / SIZE)
    assert overlap_iou(a, b) == overlap_iou(b, a)


def test_depth_disagreement_is_not_overlap():
    a = plane_frame("a", 0)
    assert directed_iou(a.depth, a.cam, np.full((SIZE, SIZE), 2.5), a.cam) == 0.0
    assert directed_iou(np.zeros((SIZE, SIZE)), a.cam, a.depth, a.cam) == 0.0


def test_overlap_matrix_is_symmetric_with_unit_diagonal():
    frames = [plane_frame("a", 0), plane_frame("b", 16), plane_frame("c", 40)]
    matrix = overlap_matrix(frames, PairingConfig())
    np.testing.assert_array_equal(matrix.iou, matrix.iou.T)
    np.testing.assert_allclose(np.diag(matrix.iou), 1.0)
    assert matrix.iou[0, 1] == pytest.approx(0.5, abs=2 / SIZE)
    assert matrix.iou[1, 2] == pytest.approx(0.25, abs=2 / SIZE)
    assert matrix.iou[0, 2] == 0.0
    threaded = overlap_matrix(frames, workers=3)
    np.testing.assert_array_equal(threaded.iou, matrix.iou)
    table = matrix.to_frame()
    assert list(table.index) == ["a", "b", "c"]
    assert table.loc["a", "b"] == matrix.iou[0, 1]


def banded_matrix(n: int = 5, value: float = 0.5) -> OverlapMatrix:
    iou = np.full((n, n), value)
    np.fill_diagonal(iou, 1.0)
    return OverlapMatrix(tuple(f"f{k}" for k in range(n)), iou)


def test_sampled_pairs_are_distinct_in_band_and_deterministic():
    matrix = banded_matrix()
    pairs = sample_pairs(matrix, 0.3, 0.8, count=4, seed=7)
    assert len(pairs) == len(set(pairs)) == 4
    assert all(a < b for a, b in pairs)
    assert pairs == sample_pairs(matrix, 0.3, 0.8, count=4, seed=7)


def test_sampler_returns_what_the_band_holds():
    matrix = banded_matrix(3)
    matrix.iou[0, 2] = matrix.iou[2, 0] = 0.9
    assert sorted(sample_pairs(matrix, 0.3, 0.8, count=10)) == [("f0", "f1"), ("f1", "f2")]
    assert sample_pairs(matrix, 0.95, 0.99, count=3) == []


def test_sampler_rejects_empty_band():
    with pytest.raises(ValueError):
        sample_pairs(banded_matrix(), 0.8, 0.3)
    with pytest.raises(ValueError):
        sample_pairs(banded_matrix(), 0.5, 0.5)
