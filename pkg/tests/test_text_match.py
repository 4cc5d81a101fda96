import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.oracles import scalar_attention
from src.text_match import (AttentionLayer, CrossAttentionStack, TextFeatures, attend,
                            gt_assignment_from_masks, select_query, text_matching_loss)
from src.utils.exceptions import DimensionMismatchException, NonFiniteException


def random_stack(rng, d_text, d, d_k, depth=2):
    return CrossAttentionStack(tuple(
        AttentionLayer(rng.normal(size=(d_text, d_k)), rng.normal(size=(d, d_k)), rng.normal(size=(d, d_text)))
        for _ in range(depth)
    ))


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_attention_matches_scalar_loops(seed, d_text, d, d_k):
    rng = np.random.default_rng(seed)
    stack = random_stack(rng, d_text, d, d_k)
    text = rng.normal(size=(2, d_text))
    queries = rng.normal(size=(4, d))
    np.testing.assert_allclose(attend(TextFeatures(text), queries, stack),
                               scalar_attention(text, queries, stack.layers), atol=1e-10)


def test_zero_value_projection_keeps_text_unchanged(rng):
    layer = AttentionLayer(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), np.zeros((3, 3)))
    text = TextFeatures(rng.normal(size=(1, 3)))
    out = attend(text, rng.normal(size=(5, 3)), CrossAttentionStack((layer,)))
    np.testing.assert_array_equal(out, text.feats)


def test_select_query_picks_best_score_with_lowest_index_on_ties():
    queries = np.eye(4)
    stack = CrossAttentionStack((AttentionLayer(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 4))),))
    ids, scores = select_query(TextFeatures([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]), queries, stack)
    assert ids.tolist() == [1, 2]
    assert scores.shape == (2, 4)


def test_stack_validation():
    with pytest.raises(DimensionMismatchException):
        CrossAttentionStack(())
    with pytest.raises(DimensionMismatchException):
        CrossAttentionStack((AttentionLayer(np.zeros((3, 2)), np.zeros((4, 5)), np.zeros((4, 3))),))
    with pytest.raises(NonFiniteException):
        CrossAttentionStack((AttentionLayer(np.full((3, 2), np.nan), np.zeros((4, 2)), np.zeros((4, 3))),))


def test_stack_from_tensors():
    tensors = {"attn_wq_0": np.zeros((3, 2)), "attn_wk_0": np.zeros((4, 2)), "attn_wv_0": np.zeros((4, 3)),
               "attn_wq_1": np.zeros((3, 2)), "attn_wk_1": np.zeros((4, 2)), "attn_wv_1": np.zeros((4, 3))}
    stack = CrossAttentionStack.from_tensors(tensors)
    assert len(stack.layers) == 2
    assert (stack.d_text, stack.d_query) == (3, 4)
    del tensors["attn_wv_1"]
    with pytest.raises(DimensionMismatchException):
        CrossAttentionStack.from_tensors(tensors)


def test_attend_rejects_mismatched_queries(rng):
    stack = random_stack(rng, 3, 4, 2, depth=1)
    with pytest.raises(DimensionMismatchException):
        attend(TextFeatures(rng.normal(size=(1, 3))), rng.normal(size=(5, 2)), stack)


def test_text_features_reject_non_finite():
    with pytest.raises(NonFiniteException):
        TextFeatures([[np.inf, 0.0]])


def test_uniform_scores_give_log_query_count():
    onehot = np.zeros((2, 100))
    onehot[0, 3] = onehot[1, 99] = 1.0
    assert text_matching_loss(np.zeros((2, 100)), onehot) == pytest.approx(math.log(100), abs=1e-9)


def test_confident_correct_scores_give_near_zero_loss():
    scores = np.array([[0.0, 50.0, 0.0]])
    assert text_matching_loss(scores, [[0.0, 1.0, 0.0]]) < 1e-12


def test_text_loss_requires_one_hot_rows():
    with pytest.raises(ValueError):
        text_matching_loss(np.zeros((1, 3)), [[0.5, 0.5, 0.0]])
    with pytest.raises(DimensionMismatchException):
        text_matching_loss(np.zeros((1, 3)), [[1.0, 0.0]])


def test_gt_assignment_matches_the_overlapping_query():
    pred = np.zeros((3, 1, 2, 2))
    pred[2, 0, 0] = 1.0
    pred[0, 0, 1] = 1.0
    gt = np.zeros((1, 2, 2))
    gt[0, 0] = 1.0
    onehot = gt_assignment_from_masks(pred, [gt])
    assert onehot.tolist() == [[0.0, 0.0, 1.0]]


def test_gt_assignment_rejects_more_prompts_than_queries():
    with pytest.raises(DimensionMismatchException):
        gt_assignment_from_masks(np.zeros((1, 1, 2, 2)), [np.zeros((1, 2, 2))] * 2)


def test_oracle_prompt_selects_the_chair_query(oracle):
    ids, scores = select_query(oracle.text_features(), oracle.preds.queries, oracle.attention_stack())
    assert ids.tolist() == [1]
    onehot = gt_assignment_from_masks(oracle.preds.mask_logits >= 0.0, list(oracle.get("gt_text_masks")))
    assert onehot.argmax(axis=1).tolist() == [1]
    assert text_matching_loss(scores, onehot) < text_matching_loss(np.zeros_like(scores), onehot)
