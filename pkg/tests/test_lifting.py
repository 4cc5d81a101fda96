import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.config_parser import LiftingConfig
from src.lifting import (aggregate_multiview, class_query_maps, derive_label_maps, filter_queries,
                         instance_predictions, lift_pipeline, lift_to_3d, segmentation_from_gaussian_labels)
from src.metrics import cross_view_agreement
from src.oracles import scalar_lifting
from src.scene_core import BACKGROUND, ClassTaxonomy, LabelMaps, SemanticPredictions
from src.synthetic import CHAIR, TABLE, WALL, random_field, random_predictions
from src.utils.exceptions import (AttributeBudgetException, DimensionMismatchException,
                                  NonFiniteException, UnknownInstanceException)

TAXONOMY = ClassTaxonomy(("floor", "chair", "no-object"), (False, True, False))


def test_filter_keeps_confident_non_background_queries():
    class_logits = np.array([[5.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.2, 0.1, 0.0], [0.0, 6.0, 0.0]])
    preds = SemanticPredictions(np.zeros((4, 1, 2, 2)), class_logits)
    filtered = filter_queries(preds, 0.5)
    assert filtered.kept == (0, 3)
    np.testing.assert_array_equal(filtered.class_logits, class_logits[[0, 3]])


def test_filter_rejects_bad_threshold():
    preds = SemanticPredictions(np.zeros((1, 1, 1, 1)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        filter_queries(preds, 1.0)


def test_class_query_maps_is_outer_product():
    class_logits = np.array([[1.0, 2.0, 0.5]])
    mask_logits = np.array([[[[0.0, 2.0]]]])
    maps = class_query_maps(class_logits, mask_logits)
    conf = np.exp(class_logits[0]) / np.exp(class_logits[0]).sum()
    sig = 1.0 / (1.0 + np.exp(-mask_logits[0, 0, 0]))
    assert maps.z.shape == (1, 1, 3, 1, 2)
    np.testing.assert_allclose(maps.z[0, 0, :, 0, :], np.outer(conf, sig))


def test_class_query_maps_clips_infinite_mask_logits():
    maps = class_query_maps(np.zeros((1, 2)), np.array([[[[np.inf, -np.inf]]]]))
    assert np.all(np.isfinite(maps.z))
    assert maps.mask_prob[0, 0, 0, 0] == pytest.approx(1.0)


def test_class_query_maps_rejects_nan():
    with pytest.raises(NonFiniteException):
        class_query_maps(np.zeros((1, 2)), np.array([[[[np.nan]]]]))
    with pytest.raises(DimensionMismatchException):
        class_query_maps(np.zeros((2, 2)), np.zeros((1, 1, 1, 1)))


def test_label_ties_go_to_lower_index():
    # two kept queries with identical predictions: the lower original index wins
    preds = SemanticPredictions(np.full((2, 1, 1, 1), 5.0), np.array([[0.0, 8.0, 0.0]] * 2))
    filtered = filter_queries(preds, 0.5)
    maps = class_query_maps(filtered.class_logits, filtered.mask_logits, filtered.kept)
    labels = derive_label_maps(maps, 0.3, TAXONOMY)
    assert labels.sem[0, 0, 0] == 1
    assert labels.ins[0, 0, 0] == 0


def test_low_probability_pixels_are_background():
    preds = SemanticPredictions(np.array([[[[5.0, -5.0]]]]), np.array([[8.0, 0.0, 0.0]]))
    maps = class_query_maps(preds.class_logits, preds.mask_logits, (4,))
    labels = derive_label_maps(maps, 0.3, TAXONOMY)
    assert labels.sem.tolist() == [[[0, BACKGROUND]]]
    assert labels.ins.tolist() == [[[4, BACKGROUND]]]


def test_no_kept_queries_give_background_everywhere():
    preds = SemanticPredictions(np.zeros((2, 1, 2, 2)), np.array([[0.0, 0.0, 9.0]] * 2))
    filtered = filter_queries(preds, 0.5)
    maps = class_query_maps(filtered.class_logits, filtered.mask_logits, filtered.kept)
    labels = derive_label_maps(maps, 0.3, TAXONOMY)
    assert filtered.kept == ()
    assert np.all(labels.sem == BACKGROUND)
    assert np.all(labels.ins == BACKGROUND)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(2, 4))
def test_vectorized_lifting_matches_scalar_loops(seed, n_q, n_c):
    rng = np.random.default_rng(seed)
    preds = random_predictions(rng, n_q, n_c, (2, 4, 4))
    taxonomy = ClassTaxonomy(tuple(f"c{c}" for c in range(n_c)), (False,) * n_c)
    filtered = filter_queries(preds, 0.5)
    maps = class_query_maps(filtered.class_logits, filtered.mask_logits, filtered.kept)
    labels = derive_label_maps(maps, 0.3, taxonomy)
    kept, z, sem, ins = scalar_lifting(preds.mask_logits, preds.class_logits, 0.5, 0.3)
    assert list(filtered.kept) == kept
    if kept:
        np.testing.assert_allclose(maps.z, z, atol=1e-12)
    np.testing.assert_array_equal(labels.sem, sem)
    np.testing.assert_array_equal(labels.ins, ins)


def test_lift_to_3d_sets_follow_pixel_indices(rng):
    field = random_field(rng, 8, dims=(2, 2, 2))
    sem = np.array([[[0, 0], [1, BACKGROUND]], [[1, 1], [0, 0]]])
    ins = np.array([[[2, 2], [5, BACKGROUND]], [[5, 5], [2, 2]]])
    seg = lift_to_3d(LabelMaps(sem, ins, (2, 5)), field, TAXONOMY, text_id=5)
    assert sorted(seg.sem_sets) == [0, 1]
    np.testing.assert_array_equal(seg.sem_sets[0], [0, 1, 6, 7])
    np.testing.assert_array_equal(seg.ins_sets[5], [2, 4, 5])
    assert sorted(seg.pano.stuff) == [0]
    assert sorted(seg.pano.things) == [5]
    np.testing.assert_array_equal(seg.text_set, [2, 4, 5])
    sem_g, ins_g = seg.per_gaussian(8)
    assert sem_g[3] == BACKGROUND and ins_g[3] == BACKGROUND


def test_lift_to_3d_rejects_unknown_text_query(rng):
    field = random_field(rng, 4, dims=(1, 2, 2))
    labels = LabelMaps(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), (0,))
    with pytest.raises(UnknownInstanceException):
        lift_to_3d(labels, field, TAXONOMY, text_id=3)
    with pytest.raises(DimensionMismatchException):
        lift_to_3d(labels, random_field(rng, 4), TAXONOMY)


def test_segmentation_rebuilds_from_dense_labels(rng):
    field = random_field(rng, 4, dims=(1, 2, 2))
    labels = LabelMaps([[[0, 1], [1, BACKGROUND]]], [[[0, 3], [3, BACKGROUND]]], (0, 3))
    seg = lift_to_3d(labels, field, TAXONOMY)
    rebuilt = segmentation_from_gaussian_labels(*seg.per_gaussian(4), TAXONOMY)
    assert rebuilt.sem_sets.keys() == seg.sem_sets.keys()
    for key in seg.ins_sets:
        np.testing.assert_array_equal(rebuilt.ins_sets[key], seg.ins_sets[key])


def test_aggregation_budget(disagreement):
    maps = class_query_maps(disagreement.preds.class_logits, disagreement.preds.mask_logits)
    with pytest.raises(AttributeBudgetException):
        aggregate_multiview(maps, disagreement.field, disagreement.cams, LiftingConfig(attr_budget=4))


def test_aggregation_needs_pixel_aligned_field(disagreement, rng):
    maps = class_query_maps(disagreement.preds.class_logits, disagreement.preds.mask_logits)
    with pytest.raises(DimensionMismatchException):
        aggregate_multiview(maps, random_field(rng, 10), disagreement.cams)


def test_oracle_lifting_reproduces_ground_truth(oracle):
    result = lift_pipeline(oracle.field, oracle.preds, oracle.cams, oracle.taxonomy,
                           oracle.engine_config, text_ids=[1])
    assert result.labels.kept == (WALL, CHAIR, TABLE)
    np.testing.assert_array_equal(result.labels.sem, oracle.get("gt_sem"))
    np.testing.assert_array_equal(result.labels.ins, oracle.get("gt_ins"))
    chair_pixels = np.flatnonzero(oracle.get("gt_sem").ravel() == CHAIR)
    np.testing.assert_array_equal(result.text_sets[0], chair_pixels)
    np.testing.assert_array_equal(result.segmentation.text_set, chair_pixels)


def test_filtered_text_query_yields_empty_set(oracle):
    result = lift_pipeline(oracle.field, oracle.preds, oracle.cams, oracle.taxonomy,
                           oracle.engine_config, text_ids=[4])
    assert result.text_sets[0].size == 0
    assert result.segmentation.text_set is None


def test_aggregation_resolves_cross_view_disagreement(disagreement):
    config = disagreement.engine_config
    plain = lift_pipeline(disagreement.field, disagreement.preds, disagreement.cams,
                          disagreement.taxonomy, config, aggregate=False).labels
    fused = lift_pipeline(disagreement.field, disagreement.preds, disagreement.cams,
                          disagreement.taxonomy, config, aggregate=True).labels
    chair = disagreement.get("gt_sem") == CHAIR
    assert set(plain.ins[0][chair[0]].tolist()) == {1}
    assert set(plain.ins[1][chair[1]].tolist()) == {2}
    assert set(fused.ins[chair].tolist()) == {1}
    assert cross_view_agreement(plain, disagreement.field, disagreement.cams) < 1.0
    assert cross_view_agreement(fused, disagreement.field, disagreement.cams) == 1.0


def test_instance_predictions_score_with_query_confidence(oracle):
    result = lift_pipeline(oracle.field, oracle.preds, oracle.cams, oracle.taxonomy, oracle.engine_config)
    instances = instance_predictions(result.labels, result.filtered, oracle.taxonomy)
    assert [(x.ins_id, x.class_id) for x in instances] == [(0, WALL), (1, CHAIR), (2, TABLE)]
    assert all(x.score > 0.99 for x in instances)
