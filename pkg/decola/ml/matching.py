"""
Set matching and the detection losses.

The matching cost reuses the weighted loss terms (2 * BCE + 2 * (1 - GIoU) +
5 * L1, probabilities clamped to [1e-6, 1 - 1e-6]). Conditioned outputs are
matched class by class so queries never compete across classes.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf
from scipy.optimize import linear_sum_assignment

from decola.errors import MatchingError
from decola.ml.decoder import DecoderMode, DecoderOutput
from decola.ml.geometry import box_cxcywh_to_xyxy, generalized_box_iou, generalized_box_iou_matched

logger = logging.getLogger(__name__)

PROB_EPS = 1e-6
LARGE_COST = 1e12


@dataclass
class LossWeights:
    cls: float = 2.0
    giou: float = 2.0
    l1: float = 5.0

    @classmethod
    def from_config(cls, config) -> "LossWeights":
        return cls(cls=config.cls_weight, giou=config.giou_weight, l1=config.l1_weight)


@dataclass
class MatchResult:
    assignment: List[Tuple[int, int]]
    unmatched_predictions: List[int]
    total_cost: float

    @property
    def prediction_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.assignment], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.assignment], dtype=np.int64)


@dataclass
class GroundTruth:
    """Normalized CXCYWH boxes of one image with their class names"""

    boxes: np.ndarray
    classes: List[str]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.classes) != self.boxes.shape[0]:
            raise MatchingError(f"{self.boxes.shape[0]} boxes but {len(self.classes)} class names")

    def __len__(self) -> int:
        return len(self.classes)

    def of_class(self, name: str) -> np.ndarray:
        keep = [i for i, c in enumerate(self.classes) if c == name]
        return self.boxes[keep]


@dataclass
class LossBreakdown:
    cls: tf.Tensor
    giou: tf.Tensor
    l1: tf.Tensor
    first_stage: tf.Tensor
    total: tf.Tensor
    weights: LossWeights = field(default_factory=LossWeights)
    num_gt: int = 0

    def as_dict(self) -> Dict[str, float]:
        return {
            "cls": float(self.cls),
            "giou": float(self.giou),
            "l1": float(self.l1),
            "first_stage": float(self.first_stage),
            "total": float(self.total),
        }


def match_hungarian(cost: np.ndarray) -> MatchResult:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"Cost matrix must be 2-D (got shape {cost.shape})")
    if np.isnan(cost).any():
        rows, cols = np.nonzero(np.isnan(cost))
        raise MatchingError("NaN in matching cost", row=int(rows[0]), col=int(cols[0]))
    num_predictions = cost.shape[0]
    if cost.size == 0:
        return MatchResult([], list(range(num_predictions)), 0.0)

    cost = np.clip(cost, -LARGE_COST, LARGE_COST)
    rows, cols = linear_sum_assignment(cost)
    assignment = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {p for p, _ in assignment}
    return MatchResult(
        assignment=assignment,
        unmatched_predictions=[p for p in range(num_predictions) if p not in matched],
        total_cost=float(cost[rows, cols].sum()),
    )


def detection_cost(
    probs: np.ndarray,
    pred_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    weights: Optional[LossWeights] = None,
) -> np.ndarray:
    """
    Pairwise matching cost [P, G]. `probs` is [P] (score of the target class
    per prediction) or [P, G] (score of each ground truth's class).
    """
    weights = weights or LossWeights()
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    pred = tf.constant(np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4))
    gt = tf.constant(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))

    cls_cost = -np.log(probs)
    if cls_cost.ndim == 1:
        cls_cost = np.repeat(cls_cost[:, None], gt.shape[0], axis=1)
    l1_cost = tf.reduce_sum(tf.abs(pred[:, None, :] - gt[None, :, :]), axis=-1).numpy()
    giou_cost = 1.0 - generalized_box_iou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(gt)).numpy()
    return weights.cls * cls_cost + weights.giou * giou_cost + weights.l1 * l1_cost


CostFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _weighted(weights: LossWeights) -> CostFn:
    return lambda scores, boxes, gt_boxes: detection_cost(scores, boxes, gt_boxes, weights)


def match_per_class(
    pred_scores: np.ndarray,
    pred_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    cost_fn: Optional[CostFn] = None,
) -> MatchResult:
    """Hungarian matching between the queries of one class and that class's ground truth"""
    pred_scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return MatchResult([], list(range(pred_scores.shape[0])), 0.0)
    cost_fn = cost_fn or detection_cost
    return match_hungarian(cost_fn(pred_scores, pred_boxes, gt_boxes))


def _box_terms(pred_boxes: tf.Tensor, gt_boxes: np.ndarray, match: MatchResult) -> Tuple[tf.Tensor, tf.Tensor]:
    if not match.assignment:
        zero = tf.zeros((), pred_boxes.dtype)
        return zero, zero
    pred = tf.gather(pred_boxes, match.prediction_indices)
    target = tf.constant(gt_boxes[match.target_indices], dtype=pred_boxes.dtype)
    l1 = tf.reduce_sum(tf.abs(pred - target))
    giou = tf.reduce_sum(1.0 - generalized_box_iou_matched(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(target)))
    return giou, l1


def federated_class_subset(num_classes: int, present: Sequence[int], sample_size: int, seed: int) -> np.ndarray:
    """Sorted column indices: every present class plus a seeded sample of absent ones"""
    present = sorted(set(int(c) for c in present))
    absent = np.array([c for c in range(num_classes) if c not in set(present)], dtype=np.int64)
    sample_size = max(0, min(int(sample_size), absent.shape[0]))
    rng = np.random.default_rng(seed)
    sampled = rng.choice(absent, size=sample_size, replace=False) if sample_size else np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([np.array(present, dtype=np.int64), sampled]))


def federated_class_loss(
    logits: tf.Tensor,
    targets: tf.Tensor,
    present: Sequence[int],
    sample_size: int,
    seed: int,
) -> tf.Tensor:
    """Summed sigmoid CE over the present classes and `sample_size` sampled absent classes"""
    subset = federated_class_subset(int(logits.shape[-1]), present, sample_size, seed)
    logits = tf.gather(logits, subset, axis=-1)
    targets = tf.gather(tf.cast(targets, logits.dtype), subset, axis=-1)
    return tf.reduce_sum(tf.nn.sigmoid_cross_entropy_with_logits(labels=targets, logits=logits))


def _sigmoid(x: tf.Tensor) -> np.ndarray:
    return tf.sigmoid(tf.stop_gradient(x)).numpy().astype(np.float64)


def _conditioned_layer_loss(out: DecoderOutput, layer, gt: GroundTruth, weights: LossWeights):
    n = out.n
    multiclass = out.mode == DecoderMode.CONDITIONED_MULTICLASS
    num_queries = int(layer.boxes.shape[0])
    blocks = [out.query_provenance[i] for i in range(0, num_queries, n)]
    class_index = {name: i for i, name in enumerate(out.class_names)}

    target_positions: List[List[int]] = []
    giou_total = tf.zeros((), layer.logits.dtype)
    l1_total = tf.zeros((), layer.logits.dtype)
    for block, name in enumerate(blocks):
        rows = slice(block * n, (block + 1) * n)
        column = class_index[name] if multiclass else 0
        block_logits = layer.logits[rows, column]
        block_boxes = layer.boxes[rows]
        gt_boxes = gt.of_class(name)
        match = match_per_class(_sigmoid(block_logits), block_boxes.numpy(), gt_boxes, _weighted(weights))
        for p, _ in match.assignment:
            target_positions.append([block * n + p, column])
        giou, l1 = _box_terms(block_boxes, gt_boxes, match)
        giou_total += giou
        l1_total += l1

    targets = tf.zeros_like(layer.logits)
    if target_positions:
        targets = tf.tensor_scatter_nd_update(
            targets, tf.constant(target_positions, dtype=tf.int32), tf.ones(len(target_positions), layer.logits.dtype)
        )
    cls = tf.reduce_sum(tf.nn.sigmoid_cross_entropy_with_logits(labels=targets, logits=layer.logits))
    return cls, giou_total, l1_total


def _open_vocab_layer_loss(out: DecoderOutput, layer, gt: GroundTruth, weights: LossWeights, federated: Optional[Tuple[float, int]]):
    class_index = {name: i for i, name in enumerate(out.class_names)}
    keep = [i for i, c in enumerate(gt.classes) if c in class_index]
    gt_boxes = gt.boxes[keep]
    gt_columns = np.array([class_index[gt.classes[i]] for i in keep], dtype=np.int64)

    probs = _sigmoid(layer.logits)
    if len(keep):
        match = match_hungarian(detection_cost(probs[:, gt_columns], layer.boxes.numpy(), gt_boxes, weights))
    else:
        match = MatchResult([], list(range(probs.shape[0])), 0.0)

    targets = tf.zeros_like(layer.logits)
    if match.assignment:
        positions = [[p, int(gt_columns[g])] for p, g in match.assignment]
        targets = tf.tensor_scatter_nd_update(
            targets, tf.constant(positions, dtype=tf.int32), tf.ones(len(positions), layer.logits.dtype)
        )
    if federated is None:
        cls = tf.reduce_sum(tf.nn.sigmoid_cross_entropy_with_logits(labels=targets, logits=layer.logits))
    else:
        fraction, seed = federated
        num_absent = len(out.class_names) - len(set(gt_columns.tolist()))
        cls = federated_class_loss(layer.logits, targets, gt_columns.tolist(), int(round(fraction * num_absent)), seed)
    giou, l1 = _box_terms(layer.boxes, gt_boxes, match)
    return cls, giou, l1


def set_loss(
    out: DecoderOutput,
    gt: GroundTruth,
    weights: Optional[LossWeights] = None,
    box_loss: bool = True,
    federated: Optional[Tuple[float, int]] = None,
    first_stage: Optional[tf.Tensor] = None,
) -> LossBreakdown:
    """
    Deep-supervised set loss averaged over decoder layers and normalized by the
    number of ground-truth objects (min 1). `federated` is (sample fraction,
    seed) for open-vocabulary outputs.
    """
    weights = weights or LossWeights()
    if out.mode == DecoderMode.OPEN_VOCAB_MULTICLASS:
        num_gt = sum(1 for c in gt.classes if c in set(out.class_names))
    else:
        conditioned = set(out.query_provenance)
        num_gt = sum(1 for c in gt.classes if c in conditioned)
    normalizer = float(max(num_gt, 1))

    dtype = out.final.logits.dtype
    cls_sum = tf.zeros((), dtype)
    giou_sum = tf.zeros((), dtype)
    l1_sum = tf.zeros((), dtype)
    for layer in out.per_layer:
        if out.mode == DecoderMode.OPEN_VOCAB_MULTICLASS:
            cls, giou, l1 = _open_vocab_layer_loss(out, layer, gt, weights, federated)
        else:
            cls, giou, l1 = _conditioned_layer_loss(out, layer, gt, weights)
        cls_sum += cls
        giou_sum += giou
        l1_sum += l1

    num_layers = float(len(out.per_layer))
    cls = cls_sum / (num_layers * normalizer)
    giou = giou_sum / (num_layers * normalizer)
    l1 = l1_sum / (num_layers * normalizer)
    if not box_loss:
        giou = tf.zeros((), dtype)
        l1 = tf.zeros((), dtype)
    first = tf.zeros((), dtype) if first_stage is None else tf.cast(first_stage, dtype)
    total = weights.cls * cls + weights.giou * giou + weights.l1 * l1 + first
    return LossBreakdown(cls, giou, l1, first, total, weights, num_gt)


def first_stage_loss(
    scores: Dict[str, tf.Tensor],
    proposals: tf.Tensor,
    gt: Dict[str, np.ndarray],
    topk: int,
    weights: Optional[LossWeights] = None,
    negative_weight: float = 1.0,
    box_loss: bool = True,
) -> tf.Tensor:
    """
    First-stage loss over grid proposals.

    `scores` maps each conditioning key (a class name, or "an object") to
    per-location logits [M]; `gt` maps the same keys to CXCYWH boxes. For each
    key only the top-`topk` locations by score can be matched and only they
    enter the classification term.
    """
    weights = weights or LossWeights()
    dtype = proposals.dtype
    total = tf.zeros((), dtype)
    num_gt = 0
    for key, logits in scores.items():
        gt_boxes = np.asarray(gt.get(key, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
        num_gt += gt_boxes.shape[0]
        k = min(int(topk), int(logits.shape[0]))
        candidates = np.argsort(-tf.stop_gradient(logits).numpy(), kind="stable")[:k]
        cand_logits = tf.gather(logits, candidates)
        cand_boxes = tf.gather(proposals, candidates)
        match = match_per_class(_sigmoid(cand_logits), cand_boxes.numpy(), gt_boxes, _weighted(weights))

        targets = np.zeros(k)
        sample_weights = np.full(k, negative_weight)
        if match.assignment:
            targets[match.prediction_indices] = 1.0
            sample_weights[match.prediction_indices] = 1.0
        bce = tf.nn.sigmoid_cross_entropy_with_logits(labels=tf.constant(targets, dtype), logits=cand_logits)
        total += weights.cls * tf.reduce_sum(bce * tf.constant(sample_weights, dtype))
        if box_loss:
            giou, l1 = _box_terms(cand_boxes, gt_boxes, match)
            total += weights.giou * giou + weights.l1 * l1
    return total / float(max(num_gt, 1))
