import numpy as np
import pytest
import tensorflow as tf

from decola.errors import SelectionError
from decola.ml.selection import (
    LEARNED_OBJECTNESS,
    build_classic_queries,
    build_conditioned_queries,
    score_classic,
    score_conditioned,
    select_topk,
)
from decola.ml.vocabulary import embed_class
from decola.utils.diagnostics import diagnostics

from tests.helpers import make_grid


@pytest.fixture
def grid(vocabulary, rng):
    return make_grid(rng.standard_normal((4 * 5 + 2 * 3, vocabulary.dim)), shapes=[(4, 5), (2, 3)])


class TestScoreClassic:
    def test_zero_weights(self, rng):
        scores = score_classic(rng.standard_normal((6, 8)).astype(np.float32), tf.zeros(8))
        np.testing.assert_array_equal(scores.numpy(), 0.0)

    def test_matches_dot_product(self, rng):
        features, w = rng.standard_normal((20, 8)), rng.standard_normal(8)
        scores = score_classic(tf.constant(features), tf.constant(w))
        np.testing.assert_allclose(scores.numpy(), features @ w, atol=1e-6)

    def test_linear(self, rng):
        features, w = rng.standard_normal((5, 8)), tf.constant(rng.standard_normal(8))
        np.testing.assert_allclose(
            score_classic(tf.constant(3.0 * features), w).numpy(),
            3.0 * score_classic(tf.constant(features), w).numpy(),
            atol=1e-9,
        )


class TestScoreConditioned:
    def test_parallel_and_antiparallel(self, vocabulary):
        t = embed_class(vocabulary, "red circle")
        scores = score_conditioned(tf.constant(np.stack([t.vector, -t.vector])), t)
        np.testing.assert_allclose(scores.numpy(), [1.0, -1.0], atol=1e-9)

    def test_scale_invariant(self, vocabulary, rng):
        t = embed_class(vocabulary, "red circle")
        features = rng.standard_normal((10, vocabulary.dim))
        np.testing.assert_allclose(
            score_conditioned(tf.constant(2.0 * features), t).numpy(),
            score_conditioned(tf.constant(features), t).numpy(),
            atol=1e-9,
        )

    def test_bounded(self, vocabulary, rng):
        scores = score_conditioned(tf.constant(rng.standard_normal((50, vocabulary.dim))), embed_class(vocabulary, "blue square"))
        assert np.all(np.abs(scores.numpy()) <= 1.0)

    def test_zero_norm_feature(self, vocabulary):
        features = np.zeros((3, vocabulary.dim))
        features[1] = 1.0
        scores = score_conditioned(tf.constant(features), embed_class(vocabulary, "blue square"))
        assert scores.numpy()[0] == 0.0 and scores.numpy()[2] == 0.0
        assert diagnostics.get("zero_norm_feature") == 2


class TestSelectTopk:
    def test_largest(self):
        assert set(select_topk([0.1, 0.9, 0.5], 2).tolist()) == {1, 2}
        assert select_topk([0.1, 0.9, 0.5], 2).tolist() == [1, 2]

    def test_ties_go_to_smaller_index(self):
        assert select_topk([0.3, 0.3, 0.3, 0.3], 2).tolist() == [0, 1]

    def test_matches_sort_oracle(self, rng):
        for _ in range(1000):
            size = int(rng.integers(1, 30))
            scores = rng.integers(0, 5, size).astype(np.float64)
            k = int(rng.integers(0, size + 1))
            oracle = sorted(range(size), key=lambda i: (-scores[i], i))[:k]
            assert select_topk(scores, k).tolist() == oracle

    def test_zero_k(self):
        assert select_topk([0.1, 0.2], 0).tolist() == []

    def test_k_too_large(self):
        with pytest.raises(SelectionError):
            select_topk([0.1, 0.2], 3)

    def test_negative_k(self):
        with pytest.raises(SelectionError):
            select_topk([0.1, 0.2], -1)


class TestBuildConditionedQueries:
    def test_budget_exact(self, grid, vocabulary):
        conditioning = [embed_class(vocabulary, name) for name in vocabulary.classes[:3]]
        batch = build_conditioned_queries(grid, conditioning, n=5)
        assert batch.num_queries == 15
        assert tuple(batch.stacked_features().shape) == (15, vocabulary.dim)
        assert tuple(batch.stacked_proposals().shape) == (15, 4)
        assert batch.block_ids().tolist() == [0] * 5 + [1] * 5 + [2] * 5
        for queries in batch.per_class.values():
            assert len(queries.indices) == 5
            assert len(set(queries.coordinates)) == 5
            assert np.all(np.abs(queries.first_stage_scores.numpy()) <= 1.0)

    def test_selected_dominate_unselected(self, grid, vocabulary):
        conditioning = [embed_class(vocabulary, name) for name in vocabulary.classes]
        batch = build_conditioned_queries(grid, conditioning, n=4)
        for embedding in conditioning:
            scores = score_conditioned(grid.features, embedding).numpy()
            selected = batch.per_class[embedding.name].indices
            unselected = np.setdiff1d(np.arange(len(grid)), selected)
            assert scores[selected].min() >= scores[unselected].max()

    def test_classes_are_independent(self, grid, vocabulary):
        small = [embed_class(vocabulary, name) for name in vocabulary.classes[:2]]
        large = small + [embed_class(vocabulary, name) for name in vocabulary.classes[2:6]]
        a = build_conditioned_queries(grid, small, n=6)
        b = build_conditioned_queries(grid, large, n=6)
        for name in a.per_class:
            assert a.per_class[name].indices.tolist() == b.per_class[name].indices.tolist()
            assert np.array_equal(a.per_class[name].proposal_boxes.numpy(), b.per_class[name].proposal_boxes.numpy())

    def test_scale_invariant_selection(self, vocabulary, rng):
        features = rng.standard_normal((12, vocabulary.dim))
        conditioning = [embed_class(vocabulary, "yellow diamond")]
        before = build_conditioned_queries(make_grid(features), conditioning, n=4)
        features[int(rng.integers(0, 12))] *= 7.5
        after = build_conditioned_queries(make_grid(features), conditioning, n=4)
        assert before.per_class["yellow diamond"].indices.tolist() == after.per_class["yellow diamond"].indices.tolist()

    def test_single_class_reduces_to_classic(self, vocabulary, rng):
        # equal-norm features: cosine ranking equals dot-product ranking
        features = rng.standard_normal((20, vocabulary.dim))
        grid = make_grid(features / np.linalg.norm(features, axis=1, keepdims=True))
        embedding = embed_class(vocabulary, "green circle")
        conditioned = build_conditioned_queries(grid, [embedding], n=7)
        classic = build_classic_queries(grid, tf.constant(embedding.vector, dtype=tf.float32), n=7)
        assert conditioned.per_class["green circle"].indices.tolist() == classic.per_class[LEARNED_OBJECTNESS].indices.tolist()

    def test_provenance(self, grid, vocabulary):
        names = list(vocabulary.classes[:2])
        batch = build_conditioned_queries(grid, [embed_class(vocabulary, n) for n in names], n=3)
        assert batch.provenance() == [names[0]] * 3 + [names[1]] * 3
        assert batch.class_names == names

    def test_proposals_start_at_anchors(self, grid, vocabulary):
        batch = build_conditioned_queries(grid, [embed_class(vocabulary, "red square")], n=4)
        queries = batch.per_class["red square"]
        np.testing.assert_allclose(queries.proposal_boxes.numpy(), grid.anchors[queries.indices], atol=1e-5)

    def test_empty_conditioning(self, grid):
        with pytest.raises(SelectionError):
            build_conditioned_queries(grid, [], n=2)

    def test_budget_larger_than_grid(self, grid, vocabulary):
        with pytest.raises(SelectionError):
            build_conditioned_queries(grid, [embed_class(vocabulary, "red square")], n=len(grid) + 1)
