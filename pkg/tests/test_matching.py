import itertools

import numpy as np
import pytest
import tensorflow as tf

from decola.config import ModelConfig
from decola.errors import MatchingError
from decola.ml.decoder import DecoderMode, DecoderOutput, LayerOutput
from decola.ml.matching import (
    GroundTruth,
    LossWeights,
    detection_cost,
    federated_class_loss,
    federated_class_subset,
    first_stage_loss,
    match_hungarian,
    match_per_class,
    set_loss,
)
from decola.ml.model import DecolaDetector, seed_everything

from tests.conftest import MICRO_MODEL


def brute_force_cost(cost):
    rows, cols = cost.shape
    if rows >= cols:
        return min(sum(cost[p, g] for g, p in enumerate(perm)) for perm in itertools.permutations(range(rows), cols))
    return min(sum(cost[p, g] for p, g in enumerate(perm)) for perm in itertools.permutations(range(cols), rows))


class TestMatchHungarian:
    def test_single(self):
        result = match_hungarian(np.array([[3.5]]))
        assert result.assignment == [(0, 0)]
        assert result.total_cost == 3.5

    def test_two_by_two(self):
        result = match_hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert result.assignment == [(0, 0), (1, 1)]
        assert result.total_cost == 2.0

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            rows, cols = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            cost = rng.integers(0, 100, size=(rows, cols)).astype(np.float64)
            result = match_hungarian(cost)
            assert result.total_cost == brute_force_cost(cost)
            assert len(result.assignment) == min(rows, cols)
            assert len({p for p, _ in result.assignment}) == len(result.assignment)
            assert len({g for _, g in result.assignment}) == len(result.assignment)
            assert sorted(result.unmatched_predictions + [p for p, _ in result.assignment]) == list(range(rows))

    def test_real_costs(self, rng):
        for _ in range(50):
            cost = rng.random((5, 4))
            assert match_hungarian(cost).total_cost == pytest.approx(brute_force_cost(cost), abs=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(MatchingError):
            match_hungarian(np.array([[1.0, np.nan]]))

    def test_empty_ground_truth(self):
        result = match_hungarian(np.zeros((3, 0)))
        assert result.assignment == []
        assert result.unmatched_predictions == [0, 1, 2]


class TestMatchPerClass:
    def test_no_ground_truth(self):
        result = match_per_class([0.5, 0.6], np.full((2, 4), 0.5), np.zeros((0, 4)))
        assert result.assignment == []
        assert result.unmatched_predictions == [0, 1]

    def test_confident_prediction_wins(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])
        result = match_per_class([0.1, 0.9], boxes, np.array([[0.45, 0.5, 0.2, 0.3]]))
        assert result.assignment == [(1, 0)]
        costs = detection_cost([0.1, 0.9], boxes, np.array([[0.45, 0.5, 0.2, 0.3]]))
        assert costs[1, 0] < costs[0, 0]

    def test_cost_terms(self):
        pred = np.array([[0.5, 0.5, 0.2, 0.2]])
        gt = np.array([[0.6, 0.5, 0.2, 0.2]])
        cost = detection_cost([0.5], pred, gt, LossWeights(cls=0.0, giou=0.0, l1=1.0))
        assert cost[0, 0] == pytest.approx(0.1)
        cost = detection_cost([0.5], pred, pred, LossWeights(cls=1.0, giou=1.0, l1=1.0))
        assert cost[0, 0] == pytest.approx(np.log(2.0))

    def test_probabilities_clamped(self):
        cost = detection_cost([0.0, 1.0], np.full((2, 4), 0.5), np.full((1, 4), 0.5))
        assert np.isfinite(cost).all()


def conditioned_output(logits, boxes, provenance, n, num_layers=1):
    logits = tf.constant(np.asarray(logits, dtype=np.float64).reshape(-1, 1))
    boxes = tf.constant(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    layers = [LayerOutput(boxes, logits) for _ in range(num_layers)]
    return DecoderOutput(layers, DecoderMode.CONDITIONED_BINARY, provenance, list(dict.fromkeys(provenance)), n)


class TestSetLoss:
    def test_perfect_prediction(self):
        gt = GroundTruth(np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]]), ["a", "b"])
        out = conditioned_output([40.0, 40.0], gt.boxes, ["a", "b"], n=1, num_layers=2)
        loss = set_loss(out, gt)
        assert float(loss.cls) < 1e-6
        assert float(loss.giou) == pytest.approx(0.0, abs=1e-9)
        assert float(loss.l1) == pytest.approx(0.0, abs=1e-9)
        assert loss.num_gt == 2

    def test_no_ground_truth_is_negatives_only(self):
        out = conditioned_output([0.0, 1.0], np.full((2, 4), 0.5), ["a", "a"], n=2)
        loss = set_loss(out, GroundTruth(np.zeros((0, 4)), []))
        expected = np.log1p(np.exp(0.0)) + np.log1p(np.exp(1.0))
        assert float(loss.cls) == pytest.approx(expected)
        assert float(loss.giou) == 0.0 and float(loss.l1) == 0.0
        assert float(loss.total) == pytest.approx(2.0 * expected)

    def test_total_is_weighted_sum(self, rng):
        gt = GroundTruth(np.array([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]]), ["a", "b"])
        boxes = np.clip(rng.random((4, 4)), 0.05, 0.95)
        out = conditioned_output(rng.standard_normal(4), boxes, ["a", "a", "b", "b"], n=2, num_layers=2)
        loss = set_loss(out, gt, first_stage=tf.constant(0.25, tf.float64))
        expected = 2.0 * float(loss.cls) + 2.0 * float(loss.giou) + 5.0 * float(loss.l1) + 0.25
        assert float(loss.total) == pytest.approx(expected)
        assert all(np.isfinite(v) for v in loss.as_dict().values())

    def test_queries_only_match_their_class(self):
        # the "b" query sits exactly on the "a" box but may not take it
        gt = GroundTruth(np.array([[0.3, 0.3, 0.2, 0.2]]), ["a"])
        boxes = np.array([[0.8, 0.8, 0.1, 0.1], [0.3, 0.3, 0.2, 0.2]])
        out = conditioned_output([0.0, 5.0], boxes, ["a", "b"], n=1)
        loss = set_loss(out, gt)
        assert float(loss.l1) == pytest.approx(0.5 + 0.5 + 0.1 + 0.1)

    def test_box_loss_switch(self):
        gt = GroundTruth(np.array([[0.3, 0.3, 0.2, 0.2]]), ["a"])
        out = conditioned_output([0.0], [[0.5, 0.5, 0.2, 0.2]], ["a"], n=1)
        loss = set_loss(out, gt, box_loss=False)
        assert float(loss.giou) == 0.0 and float(loss.l1) == 0.0
        assert float(loss.total) == pytest.approx(2.0 * float(loss.cls))

    def test_cost_decomposes_per_class(self, rng):
        gt = GroundTruth(np.clip(rng.random((4, 4)), 0.1, 0.9), ["a", "b", "a", "b"])
        logits = rng.standard_normal(6)
        boxes = np.clip(rng.random((6, 4)), 0.05, 0.95)
        provenance = ["a", "a", "a", "b", "b", "b"]
        joint = set_loss(conditioned_output(logits, boxes, provenance, n=3), gt)
        alone = [
            set_loss(conditioned_output(logits[rows], boxes[rows], provenance[rows], n=3), gt)
            for rows in (slice(0, 3), slice(3, 6))
        ]
        # each class block normalizes by its own two boxes, the joint loss by all four
        assert 4.0 * float(joint.total) == pytest.approx(sum(2.0 * float(loss.total) for loss in alone))

    def test_block_matching_equals_joint_matching(self, rng):
        for _ in range(20):
            probs = rng.random(6)
            boxes = np.clip(rng.random((6, 4)), 0.05, 0.95)
            gt_boxes = np.clip(rng.random((4, 4)), 0.1, 0.9)
            gt_classes = np.array([0, 1, 0, 1])
            query_classes = np.array([0, 0, 0, 1, 1, 1])
            cost = detection_cost(probs, boxes, gt_boxes)
            cost[query_classes[:, None] != gt_classes[None, :]] += 1e6
            joint = sorted(match_hungarian(cost).assignment)

            blocks = []
            for c in (0, 1):
                queries = np.flatnonzero(query_classes == c)
                targets = np.flatnonzero(gt_classes == c)
                match = match_per_class(probs[queries], boxes[queries], gt_boxes[targets])
                blocks += [(int(queries[p]), int(targets[g])) for p, g in match.assignment]
            assert joint == sorted(blocks)


class TestFirstStageLoss:
    @pytest.fixture
    def proposals(self, rng):
        centers = rng.uniform(0.2, 0.8, (10, 2))
        return tf.constant(np.concatenate([centers, np.full((10, 2), 0.2)], axis=1))

    def test_vacuous_restriction(self, proposals, rng):
        scores = {"a": tf.constant(rng.standard_normal(10))}
        gt = {"a": proposals.numpy()[[2, 5]]}
        assert float(first_stage_loss(scores, proposals, gt, topk=10)) == float(
            first_stage_loss(scores, proposals, gt, topk=1000)
        )

    def test_ground_truth_outside_topk(self, proposals):
        logits = np.linspace(3.0, -3.0, 10)
        scores = {"a": tf.constant(logits)}
        gt = {"a": proposals.numpy()[[9]]}
        box_only = LossWeights(cls=0.0, giou=2.0, l1=5.0)
        assert float(first_stage_loss(scores, proposals, gt, topk=10, weights=box_only)) == pytest.approx(0.0, abs=1e-9)
        assert float(first_stage_loss(scores, proposals, gt, topk=3, weights=box_only)) > 0.0

    def test_negative_weight(self, proposals, rng):
        scores = {"a": tf.constant(rng.standard_normal(10))}
        gt = {"a": np.zeros((0, 4))}
        full = float(first_stage_loss(scores, proposals, gt, topk=10))
        half = float(first_stage_loss(scores, proposals, gt, topk=10, negative_weight=0.5))
        assert half == pytest.approx(0.5 * full)

    def test_restriction_equals_loss_on_topk_subset(self, proposals, rng):
        logits = rng.standard_normal(10)
        gt = {"a": proposals.numpy()[[1, 4, 7]] + 0.01}
        top = np.argsort(-logits, kind="stable")[:4]
        restricted = first_stage_loss({"a": tf.constant(logits)}, proposals, gt, topk=4)
        subset = first_stage_loss({"a": tf.constant(logits[top])}, tf.gather(proposals, top), gt, topk=4)
        unrestricted = first_stage_loss({"a": tf.constant(logits)}, proposals, gt, topk=10)
        assert float(restricted) == pytest.approx(float(subset), rel=1e-12)
        assert float(restricted) != pytest.approx(float(unrestricted))

    def test_topk_ranks_saturated_logits(self):
        proposals = tf.constant([[0.2, 0.2, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]], tf.float32)
        gt = {"a": proposals.numpy()[[1]]}
        saturated = first_stage_loss({"a": tf.constant([20.0, 30.0, 25.0])}, proposals, gt, topk=1)
        unsaturated = first_stage_loss({"a": tf.constant([-1.0, 30.0, 25.0])}, proposals, gt, topk=1)
        assert float(saturated) == pytest.approx(0.0, abs=1e-5)
        assert float(saturated) == pytest.approx(float(unsaturated), abs=1e-5)


class TestFederatedLoss:
    def test_subset_keeps_present_classes(self):
        for seed in range(20):
            subset = federated_class_subset(12, [3, 7], sample_size=4, seed=seed)
            assert {3, 7} <= set(subset.tolist())
            assert len(subset) == 6
            assert subset.tolist() == sorted(subset.tolist())

    def test_large_sample_is_full_loss(self, rng):
        logits = tf.constant(rng.standard_normal((5, 8)))
        targets = np.zeros((5, 8))
        targets[1, 2] = 1.0
        full = tf.reduce_sum(tf.nn.sigmoid_cross_entropy_with_logits(labels=tf.constant(targets), logits=logits))
        federated = federated_class_loss(logits, tf.constant(targets), [2], sample_size=100, seed=3)
        assert float(federated) == pytest.approx(float(full))

    def test_deterministic(self, rng):
        logits = tf.constant(rng.standard_normal((5, 8)))
        targets = tf.zeros((5, 8), dtype=tf.float64)
        first = federated_class_loss(logits, targets, [0], sample_size=3, seed=11)
        second = federated_class_loss(logits, targets, [0], sample_size=3, seed=11)
        assert float(first) == float(second)

    def test_open_vocabulary_set_loss(self, rng):
        logits = tf.constant(rng.standard_normal((4, 6)))
        boxes = tf.constant(np.tile([[0.5, 0.5, 0.2, 0.2]], (4, 1)))
        out = DecoderOutput([LayerOutput(boxes, logits)], DecoderMode.OPEN_VOCAB_MULTICLASS, None, list("abcdef"), 4)
        gt = GroundTruth(np.array([[0.5, 0.5, 0.2, 0.2]]), ["c"])
        full = set_loss(out, gt)
        sampled = set_loss(out, gt, federated=(0.4, 1))
        assert float(sampled.cls) < float(full.cls)
        assert float(full.giou) == pytest.approx(0.0, abs=1e-9)


def test_phase1_loss_gradient_matches_finite_differences(float64, vocabulary):
    """Micro-model: d=16, two decoder layers, n=4, three conditioned classes"""
    seed_everything(0)
    model = DecolaDetector(ModelConfig(**MICRO_MODEL), vocabulary, phase=1)
    rng = np.random.default_rng(0)
    image = rng.random((32, 32, 3))
    names = list(vocabulary.base_classes[:3])
    gt = GroundTruth(np.array([[0.3, 0.3, 0.3, 0.3], [0.7, 0.3, 0.2, 0.4], [0.5, 0.75, 0.4, 0.3]]), names)

    def loss_fn():
        forward = model.forward(image, names, budget=4, training=True)
        first = first_stage_loss(
            forward.first_stage_logits, forward.proposals, {name: gt.of_class(name) for name in names}, topk=1000
        )
        return set_loss(forward.output, gt, first_stage=first).total

    with tf.GradientTape() as tape:
        loss = loss_fn()
    assert loss.dtype == tf.float64
    grads = tape.gradient(loss, model.trainable_variables)
    candidates = [
        (variable, grad.numpy(), index)
        for variable, grad in zip(model.trainable_variables, grads)
        if grad is not None
        for index in range(int(np.prod(variable.shape)))
    ]
    picks = rng.choice(len(candidates), size=32, replace=False)

    step, good = 1e-4, 0
    for pick in picks:
        variable, grad, index = candidates[int(pick)]
        original = variable.numpy()
        values = []
        for sign in (1.0, -1.0):
            shifted = original.copy()
            shifted.flat[index] += sign * step
            variable.assign(shifted)
            values.append(float(loss_fn()))
        variable.assign(original)
        numeric = (values[0] - values[1]) / (2 * step)
        analytic = float(grad.flat[index])
        scale = max(abs(numeric), abs(analytic))
        if abs(numeric - analytic) <= 1e-3 * scale or scale < 1e-8:
            good += 1
    assert good >= 0.95 * len(picks)
