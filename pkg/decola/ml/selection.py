"""
Objectness scoring and top-k query selection.

Classic selection scores every grid location with a learned vector w
(s = <x, w>) and keeps one global top-k. Conditioned selection scores each
location against a class embedding t(y) with cosine similarity and keeps a
separate top-n per class, so classes never compete for queries.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import tensorflow as tf

from decola.errors import SelectionError
from decola.ml.encoder import FeatureGrid, FlatGrid, flatten_grid
from decola.ml.geometry import inverse_sigmoid
from decola.ml.vocabulary import ClassEmbedding
from decola.utils.diagnostics import diagnostics

logger = logging.getLogger(__name__)

LEARNED_OBJECTNESS = "<objectness>"


def score_classic(features: tf.Tensor, w: tf.Tensor) -> tf.Tensor:
    features = tf.convert_to_tensor(features)
    w = tf.cast(tf.reshape(w, (-1,)), features.dtype)
    return tf.linalg.matvec(features, w)


def _count_zero_norm(features: tf.Tensor, site: str) -> None:
    zero = int(tf.reduce_sum(tf.cast(tf.reduce_all(tf.equal(features, 0), axis=-1), tf.int32)))
    if zero:
        diagnostics.increment("zero_norm_feature", zero, site=site)


def score_conditioned(features: tf.Tensor, t: Union[ClassEmbedding, np.ndarray, tf.Tensor]) -> tf.Tensor:
    """Cosine between every feature row and t(y); zero-norm rows score 0"""
    features = tf.convert_to_tensor(features)
    vector = t.vector if isinstance(t, ClassEmbedding) else t
    vector = tf.math.l2_normalize(tf.cast(tf.reshape(vector, (-1,)), features.dtype))
    _count_zero_norm(features, "score_conditioned")
    cosine = tf.linalg.matvec(tf.math.l2_normalize(features, axis=-1), vector)
    return tf.clip_by_value(cosine, -1.0, 1.0)


def cosine_logits(features: tf.Tensor, text: tf.Tensor, temperature: float, bias: tf.Tensor) -> tf.Tensor:
    """temperature * cos(features, text) + bias, shape [N, K]"""
    text = tf.math.l2_normalize(tf.cast(text, features.dtype), axis=-1)
    cosine = tf.matmul(tf.math.l2_normalize(features, axis=-1), text, transpose_b=True)
    return temperature * cosine + tf.cast(bias, features.dtype)


def select_topk(scores: Union[np.ndarray, tf.Tensor, Sequence[float]], k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties go to the smaller index"""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k < 0:
        raise SelectionError(f"k must be non-negative (got {k})")
    if k > scores.shape[0]:
        raise SelectionError(f"Cannot select top-{k} from {scores.shape[0]} locations", k=k, locations=int(scores.shape[0]))
    return np.argsort(-scores, kind="stable")[:k]


@dataclass
class ClassQueries:
    name: str
    embedding: Optional[ClassEmbedding]
    indices: np.ndarray  # flattened grid indices
    features: tf.Tensor  # [n, d]
    coordinates: List[Tuple[int, int, int]]
    first_stage_scores: tf.Tensor  # [n], cosine (or <x, w> for learned objectness)
    proposal_boxes: tf.Tensor  # [n, 4] CXCYWH, detached


@dataclass
class ConditionedQueryBatch:
    per_class: Dict[str, ClassQueries]
    n: int
    conditioning: List[ClassEmbedding] = field(default_factory=list)

    @property
    def class_names(self) -> List[str]:
        return list(self.per_class)

    @property
    def num_queries(self) -> int:
        return self.n * len(self.per_class)

    def stacked_features(self) -> tf.Tensor:
        return tf.concat([q.features for q in self.per_class.values()], axis=0)

    def stacked_proposals(self) -> tf.Tensor:
        return tf.concat([q.proposal_boxes for q in self.per_class.values()], axis=0)

    def block_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.per_class)), self.n)

    def provenance(self) -> List[str]:
        return [name for name in self.per_class for _ in range(self.n)]


def proposal_boxes(flat: FlatGrid, box_deltas: Optional[tf.Tensor] = None, dtype=tf.float32) -> tf.Tensor:
    """First-stage boxes: anchors refined by deltas in inverse-sigmoid space"""
    anchors = inverse_sigmoid(tf.constant(flat.anchors, dtype=dtype))
    if box_deltas is not None:
        anchors = anchors + tf.cast(box_deltas, dtype)
    return tf.sigmoid(anchors)


def _gather(flat: FlatGrid, proposals: tf.Tensor, name, embedding, scores: tf.Tensor, n: int) -> ClassQueries:
    indices = select_topk(scores.numpy(), n)
    return ClassQueries(
        name=name,
        embedding=embedding,
        indices=indices,
        features=tf.gather(flat.features, indices),
        coordinates=[flat.coordinates[i] for i in indices],
        first_stage_scores=tf.gather(scores, indices),
        proposal_boxes=tf.stop_gradient(tf.gather(proposals, indices)),
    )


def _as_flat(g: Union[FeatureGrid, FlatGrid], anchor_scale: float) -> FlatGrid:
    return g if isinstance(g, FlatGrid) else flatten_grid(g, anchor_scale)


def build_conditioned_queries(
    g: Union[FeatureGrid, FlatGrid],
    conditioning: Sequence[ClassEmbedding],
    n: int,
    box_deltas: Optional[tf.Tensor] = None,
    anchor_scale: float = 0.1,
) -> ConditionedQueryBatch:
    if not conditioning:
        raise SelectionError("Conditioning list is empty")
    flat = _as_flat(g, anchor_scale)
    if n > len(flat):
        raise SelectionError(f"n={n} exceeds the {len(flat)} grid locations", n=n, locations=len(flat))

    proposals = proposal_boxes(flat, box_deltas, flat.features.dtype)
    per_class: Dict[str, ClassQueries] = {}
    for embedding in conditioning:
        if embedding.name in per_class:
            continue
        scores = score_conditioned(flat.features, embedding)
        per_class[embedding.name] = _gather(flat, proposals, embedding.name, embedding, scores, n)
    return ConditionedQueryBatch(per_class, n, [q.embedding for q in per_class.values()])


def build_classic_queries(
    g: Union[FeatureGrid, FlatGrid],
    w: tf.Tensor,
    n: int,
    box_deltas: Optional[tf.Tensor] = None,
    anchor_scale: float = 0.1,
) -> ConditionedQueryBatch:
    """Single query set chosen by learned objectness <x, w>"""
    flat = _as_flat(g, anchor_scale)
    if n > len(flat):
        raise SelectionError(f"n={n} exceeds the {len(flat)} grid locations", n=n, locations=len(flat))
    proposals = proposal_boxes(flat, box_deltas, flat.features.dtype)
    scores = score_classic(flat.features, w)
    queries = _gather(flat, proposals, LEARNED_OBJECTNESS, None, scores, n)
    return ConditionedQueryBatch({LEARNED_OBJECTNESS: queries}, n, [])
