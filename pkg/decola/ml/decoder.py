"""
Detection decoder: block-isolated self-attention, dense cross-attention to the
encoder grid, iterative box refinement in inverse-sigmoid space and the
cosine classification heads.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from decola.errors import BlockLayoutError, SelectionError
from decola.ml.encoder import FlatGrid
from decola.ml.geometry import BoxFormat, BoxSet, inverse_sigmoid
from decola.ml.layers import MLP, FeedForward, MultiHeadAttention, box_sine_embedding
from decola.ml.selection import ConditionedQueryBatch
from decola.ml.vocabulary import ClassEmbedding, embedding_matrix
from decola.utils.diagnostics import diagnostics

logger = logging.getLogger(__name__)


class DecoderMode(str, Enum):
    CONDITIONED_BINARY = "conditioned_binary"
    # Phase 1 ablation: conditioned queries, scores over the whole vocabulary
    CONDITIONED_MULTICLASS = "conditioned_multiclass"
    OPEN_VOCAB_MULTICLASS = "open_vocab_multiclass"


@dataclass
class LayerOutput:
    boxes: tf.Tensor  # [N, 4] CXCYWH
    logits: tf.Tensor  # [N, 1] or [N, C]


@dataclass
class DecoderOutput:
    per_layer: List[LayerOutput]
    mode: DecoderMode
    query_provenance: Optional[List[str]]
    class_names: List[str]
    n: int

    @property
    def final(self) -> LayerOutput:
        return self.per_layer[-1]

    @property
    def num_queries(self) -> int:
        return int(self.final.boxes.shape[0])

    def stacked_logits(self) -> tf.Tensor:
        return tf.stack([layer.logits for layer in self.per_layer])

    def stacked_boxes(self) -> tf.Tensor:
        return tf.stack([layer.boxes for layer in self.per_layer])


@dataclass
class DetectionSet:
    """Scored detections for one image, sorted by decreasing score"""

    boxes: np.ndarray  # [M, 4] normalized XYXY
    scores: np.ndarray
    class_names: List[str]
    query_ids: np.ndarray
    image_size: Tuple[int, int] = (1, 1)
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def box_set(self) -> BoxSet:
        return BoxSet(self.boxes, BoxFormat.XYXY, self.image_size)

    def for_class(self, name: str) -> "DetectionSet":
        keep = np.array([c == name for c in self.class_names], dtype=bool)
        return self.select(keep)

    def select(self, keep: np.ndarray) -> "DetectionSet":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return DetectionSet(
            boxes=self.boxes[keep],
            scores=self.scores[keep],
            class_names=[self.class_names[i] for i in keep],
            query_ids=self.query_ids[keep],
            image_size=self.image_size,
            class_ids=self.class_ids[keep] if len(self.class_ids) else self.class_ids,
        )

    def to_records(self) -> List[dict]:
        return [
            {
                "class": name,
                "score": float(score),
                "box": [float(c) for c in box],
                "query": int(query),
            }
            for name, score, box, query in zip(self.class_names, self.scores, self.boxes, self.query_ids)
        ]

    @classmethod
    def empty(cls, image_size: Tuple[int, int] = (1, 1)) -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0), [], np.zeros(0, dtype=np.int64), image_size)


def check_block_layout(block_ids: Sequence[int]) -> Tuple[int, int]:
    """Returns (K, n) for a contiguous layout of K equal blocks of n queries"""
    block_ids = np.asarray(block_ids).reshape(-1)
    if block_ids.size == 0:
        raise BlockLayoutError("Empty block layout")
    starts = np.concatenate([[0], np.flatnonzero(block_ids[1:] != block_ids[:-1]) + 1])
    runs = block_ids[starts]
    if len(set(runs.tolist())) != len(runs):
        raise BlockLayoutError("Queries of a block are not contiguous", blocks=runs.tolist())
    sizes = np.diff(np.concatenate([starts, [block_ids.size]]))
    if (sizes != sizes[0]).any():
        raise BlockLayoutError("Blocks have unequal sizes", sizes=sizes.tolist())
    return len(runs), int(sizes[0])


def block_self_attention(
    attention: MultiHeadAttention,
    queries: tf.Tensor,
    block_ids: Sequence[int],
    values: Optional[tf.Tensor] = None,
    training: bool = False,
) -> tf.Tensor:
    """
    Self-attention restricted to blocks of one class each, computed as one
    batched attention over a [K, n, d] reshape of the [K*n, d] queries.
    """
    num_blocks, n = check_block_layout(block_ids)
    values = queries if values is None else values
    dim = int(queries.shape[-1])
    q = tf.reshape(queries, (num_blocks, n, dim))
    v = tf.reshape(values, (num_blocks, n, dim))
    out = attention(q, q, v, training=training)
    return tf.reshape(out, (num_blocks * n, dim))


def masked_self_attention(
    attention: MultiHeadAttention,
    queries: tf.Tensor,
    block_ids: Sequence[int],
    values: Optional[tf.Tensor] = None,
    training: bool = False,
) -> tf.Tensor:
    """Same result as block_self_attention through a full (K*n)^2 masked score matrix"""
    block_ids = np.asarray(block_ids).reshape(-1)
    values = queries if values is None else values
    mask = tf.constant(block_ids[:, None] == block_ids[None, :])
    out = attention(queries[None], queries[None], values[None], attention_mask=mask[None], training=training)
    return out[0]


class ClassifierHead(tf.keras.layers.Layer):
    """logit = temperature * cos(proj(h), t) + b"""

    def __init__(self, embed_dim: int, temperature: float, bias_init: float, **kwargs):
        super().__init__(**kwargs)
        self.temperature = temperature
        self.bias_init = bias_init
        self.proj = tf.keras.layers.Dense(embed_dim, name="proj", dtype=self.dtype)

    def build(self, input_shape):
        self.bias = self.add_weight(
            name="bias",
            shape=(),
            initializer=tf.keras.initializers.Constant(self.bias_init),
            dtype=self.dtype,
        )
        super().build(input_shape)

    def project(self, hidden: tf.Tensor) -> tf.Tensor:
        return self.proj(hidden)

    def call(self, hidden: tf.Tensor, text: tf.Tensor, paired: bool = False) -> tf.Tensor:
        """
        `paired=False`: text is [C, d], returns [N, C].
        `paired=True`: text is [N, d] (one embedding per query), returns [N, 1].
        """
        features = tf.math.l2_normalize(self.proj(hidden), axis=-1)
        text = tf.math.l2_normalize(tf.cast(text, features.dtype), axis=-1)
        if paired:
            cosine = tf.reduce_sum(features * text, axis=-1, keepdims=True)
        else:
            cosine = tf.matmul(features, text, transpose_b=True)
        return self.temperature * cosine + self.bias


class DecoderLayer(tf.keras.layers.Layer):
    def __init__(self, embed_dim: int, num_heads: int, ffn_dim: int, dropout: float = 0.0, **kwargs):
        super().__init__(**kwargs)
        self.self_attn = MultiHeadAttention(embed_dim, num_heads, dropout, name="self_attn", dtype=self.dtype)
        self.norm1 = tf.keras.layers.LayerNormalization(epsilon=1e-5, name="norm1", dtype=self.dtype)
        self.cross_attn = MultiHeadAttention(embed_dim, num_heads, dropout, name="cross_attn", dtype=self.dtype)
        self.norm2 = tf.keras.layers.LayerNormalization(epsilon=1e-5, name="norm2", dtype=self.dtype)
        self.ffn = FeedForward(embed_dim, ffn_dim, dropout, name="ffn", dtype=self.dtype)
        self.norm3 = tf.keras.layers.LayerNormalization(epsilon=1e-5, name="norm3", dtype=self.dtype)

    def call(
        self,
        tgt: tf.Tensor,
        query_pos: tf.Tensor,
        memory: tf.Tensor,
        memory_pos: tf.Tensor,
        block_ids: np.ndarray,
        attention_mode: str = "block",
        training: bool = False,
    ) -> tf.Tensor:
        q = tgt + query_pos
        if attention_mode == "block":
            attended = block_self_attention(self.self_attn, q, block_ids, tgt, training=training)
        else:
            attended = masked_self_attention(self.self_attn, q, block_ids, tgt, training=training)
        tgt = self.norm1(tgt + attended)

        attended = self.cross_attn((tgt + query_pos)[None], (memory + memory_pos)[None], memory[None], training=training)
        tgt = self.norm2(tgt + attended[0])
        return self.norm3(tgt + self.ffn(tgt, training=training))


def _clamp_reference(boxes: tf.Tensor) -> tf.Tensor:
    clamped = tf.clip_by_value(boxes, 0.0, 1.0)
    outside = int(tf.reduce_sum(tf.cast(tf.logical_not(tf.equal(clamped, boxes)), tf.int32)))
    if outside:
        diagnostics.increment("reference_box_clamped", outside)
        clamped = tf.where(tf.math.is_finite(boxes), clamped, tf.fill(tf.shape(boxes), tf.cast(0.5, boxes.dtype)))
    return clamped


class Decoder(tf.keras.layers.Layer):
    """
    D decoder layers with per-layer box and class heads.

    Box refinement uses look-forward-twice: the box reported by layer l is
    sigmoid(delta_l + logit(b_{l-1})) with b_{l-1} carrying gradient, while the
    reference handed to layer l+1 is detached.
    """

    def __init__(
        self,
        embed_dim: int = 64,
        num_layers: int = 3,
        num_heads: int = 4,
        ffn_dim: int = 1024,
        dropout: float = 0.0,
        temperature: float = 50.0,
        bias_init: float = -float(np.log(99.0)),
        attention_mode: str = "block",
        **kwargs,
    ):
        super().__init__(**kwargs)
        if embed_dim % 4 != 0:
            raise ValueError(f"embed_dim must be divisible by 4 for box embeddings (got {embed_dim})")
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.attention_mode = attention_mode
        self.layers_ = [
            DecoderLayer(embed_dim, num_heads, ffn_dim, dropout, name=f"layer{i}", dtype=self.dtype)
            for i in range(num_layers)
        ]
        self.query_pos_head = MLP(embed_dim, embed_dim, 2, name="query_pos_head", dtype=self.dtype)
        self.bbox_heads = [
            MLP(embed_dim, 4, 3, zero_last=True, name=f"bbox_head{i}", dtype=self.dtype) for i in range(num_layers)
        ]
        self.class_heads = [
            ClassifierHead(embed_dim, temperature, bias_init, name=f"class_head{i}", dtype=self.dtype)
            for i in range(num_layers)
        ]

    def decode(
        self,
        queries: ConditionedQueryBatch,
        memory: FlatGrid,
        mode: DecoderMode,
        class_embeddings: Optional[Sequence[ClassEmbedding]] = None,
        training: bool = False,
    ) -> DecoderOutput:
        mode = DecoderMode(mode)
        if mode == DecoderMode.OPEN_VOCAB_MULTICLASS:
            if len(queries.per_class) != 1:
                raise SelectionError("Open-vocabulary decoding takes a single unconditioned query set")
            provenance = None
        else:
            if any(q.embedding is None for q in queries.per_class.values()):
                raise SelectionError("Conditioned decoding requires per-class provenance")
            provenance = queries.provenance()

        if mode == DecoderMode.CONDITIONED_BINARY:
            class_names = queries.class_names
            text = tf.constant(
                np.repeat(embedding_matrix(queries.conditioning), queries.n, axis=0), dtype=self.dtype
            )
        else:
            if not class_embeddings:
                raise SelectionError(f"{mode.value} decoding needs class embeddings to score against")
            class_names = [e.name for e in class_embeddings]
            text = tf.constant(embedding_matrix(class_embeddings), dtype=self.dtype)

        tgt = tf.cast(queries.stacked_features(), self.dtype)
        block_ids = queries.block_ids()
        memory_features = tf.cast(memory.features, self.dtype)
        memory_pos = tf.cast(memory.positional, self.dtype)

        reference = tf.stop_gradient(tf.cast(queries.stacked_proposals(), self.dtype))
        reference_detached = reference
        per_layer: List[LayerOutput] = []
        for i, layer in enumerate(self.layers_):
            query_pos = self.query_pos_head(box_sine_embedding(reference_detached, self.embed_dim // 2))
            tgt = layer(
                tgt, query_pos, memory_features, memory_pos, block_ids,
                attention_mode=self.attention_mode, training=training,
            )
            delta = self.bbox_heads[i](tgt)
            refined = _clamp_reference(tf.sigmoid(delta + inverse_sigmoid(reference_detached)))
            if i == 0:
                boxes = refined
            else:
                boxes = _clamp_reference(tf.sigmoid(delta + inverse_sigmoid(reference)))
            logits = self.class_heads[i](tgt, text, paired=mode == DecoderMode.CONDITIONED_BINARY)
            per_layer.append(LayerOutput(boxes, logits))
            reference = refined
            reference_detached = tf.stop_gradient(refined)

        return DecoderOutput(per_layer, mode, provenance, class_names, queries.n)

    def call(self, *args, **kwargs):
        return self.decode(*args, **kwargs)


def to_detections(out: DecoderOutput, limit_k: int, image_size: Tuple[int, int] = (1, 1)) -> DetectionSet:
    """Top `limit_k` final-layer detections; ties broken by (class id, query id)"""
    if limit_k <= 0:
        raise SelectionError(f"limit_k must be positive (got {limit_k})")
    if not out.per_layer:
        raise SelectionError("Decoder output has no layers")
    logits = out.final.logits.numpy().astype(np.float64)
    boxes = out.final.boxes.numpy().astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    num_queries = boxes.shape[0]

    if out.mode == DecoderMode.CONDITIONED_BINARY:
        class_index = {name: i for i, name in enumerate(out.class_names)}
        class_ids = np.array([class_index[name] for name in out.query_provenance], dtype=np.int64)
        query_ids = np.arange(num_queries, dtype=np.int64)
        flat_scores = scores[:, 0]
    else:
        num_classes = scores.shape[1]
        query_ids = np.repeat(np.arange(num_queries, dtype=np.int64), num_classes)
        class_ids = np.tile(np.arange(num_classes, dtype=np.int64), num_queries)
        flat_scores = scores.reshape(-1)

    order = np.lexsort((query_ids, class_ids, -flat_scores))[:limit_k]
    xyxy = np.clip(
        np.stack(
            [boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 1] - boxes[:, 3] / 2,
             boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2],
            axis=-1,
        ),
        0.0,
        1.0,
    )
    return DetectionSet(
        boxes=xyxy[query_ids[order]],
        scores=flat_scores[order],
        class_names=[out.class_names[c] for c in class_ids[order]],
        query_ids=query_ids[order],
        image_size=image_size,
        class_ids=class_ids[order],
    )
