"""
Shared transformer building blocks
"""
import math
import threading
from typing import Optional

import numpy as np
import tensorflow as tf


class AttentionStats:
    """Counts attention-score elements (batch x len_q x len_k per call, per head)"""

    def __init__(self):
        self._lock = threading.Lock()
        self.score_elements = 0
        self.calls = 0

    def record(self, elements: int) -> None:
        with self._lock:
            self.score_elements += int(elements)
            self.calls += 1

    def reset(self) -> None:
        with self._lock:
            self.score_elements = 0
            self.calls = 0


attention_stats = AttentionStats()


class MultiHeadAttention(tf.keras.layers.Layer):
    """Dense multi-headed attention over [batch, length, embed_dim] inputs"""

    def __init__(self, embed_dim: int, num_heads: int, dropout: float = 0.0, **kwargs):
        super().__init__(**kwargs)
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        if self.head_dim * num_heads != embed_dim:
            raise ValueError(
                f"embed_dim must be divisible by num_heads (got `embed_dim`: {embed_dim} and `num_heads`: {num_heads})."
            )
        self.q_proj = tf.keras.layers.Dense(embed_dim, name="q_proj", dtype=self.dtype)
        self.k_proj = tf.keras.layers.Dense(embed_dim, name="k_proj", dtype=self.dtype)
        self.v_proj = tf.keras.layers.Dense(embed_dim, name="v_proj", dtype=self.dtype)
        self.out_proj = tf.keras.layers.Dense(embed_dim, name="out_proj", dtype=self.dtype)
        self.dropout = tf.keras.layers.Dropout(rate=dropout)

    def _split_heads(self, tensor: tf.Tensor, batch_size) -> tf.Tensor:
        tensor = tf.reshape(tensor, (batch_size, -1, self.num_heads, self.head_dim))
        return tf.transpose(tensor, perm=[0, 2, 1, 3])

    def call(
        self,
        query: tf.Tensor,
        key: tf.Tensor,
        value: tf.Tensor,
        attention_mask: Optional[tf.Tensor] = None,
        training: bool = False,
    ) -> tf.Tensor:
        """`attention_mask` is boolean [batch or 1, len_q, len_k], True where attention is allowed"""
        batch_size = tf.shape(query)[0]
        q = self._split_heads(self.q_proj(query), batch_size)
        k = self._split_heads(self.k_proj(key), batch_size)
        v = self._split_heads(self.v_proj(value), batch_size)

        attention_stats.record(int(query.shape[0]) * int(query.shape[1]) * int(key.shape[1]))

        scores = tf.matmul(q, k, transpose_b=True) / tf.cast(math.sqrt(self.head_dim), q.dtype)
        if attention_mask is not None:
            scores = tf.where(attention_mask[:, None, :, :], scores, tf.cast(-1e9, scores.dtype))
        probs = tf.nn.softmax(scores, axis=-1)
        if attention_mask is not None:
            probs = tf.where(attention_mask[:, None, :, :], probs, tf.zeros_like(probs))
        probs = self.dropout(probs, training=training)

        output = tf.matmul(probs, v)
        output = tf.transpose(output, perm=[0, 2, 1, 3])
        output = tf.reshape(output, (batch_size, -1, self.embed_dim))
        return self.out_proj(output)


class FeedForward(tf.keras.layers.Layer):
    def __init__(self, embed_dim: int, hidden_dim: int, dropout: float = 0.0, **kwargs):
        super().__init__(**kwargs)
        self.fc1 = tf.keras.layers.Dense(hidden_dim, activation="relu", name="fc1", dtype=self.dtype)
        self.fc2 = tf.keras.layers.Dense(embed_dim, name="fc2", dtype=self.dtype)
        self.dropout = tf.keras.layers.Dropout(rate=dropout)

    def call(self, hidden_states: tf.Tensor, training: bool = False) -> tf.Tensor:
        hidden_states = self.fc1(hidden_states)
        hidden_states = self.dropout(hidden_states, training=training)
        return self.fc2(hidden_states)


class MLP(tf.keras.layers.Layer):
    """Stack of Dense layers with ReLU between them"""

    def __init__(self, hidden_dim: int, output_dim: int, num_layers: int, zero_last: bool = False, **kwargs):
        super().__init__(**kwargs)
        dims = [hidden_dim] * (num_layers - 1) + [output_dim]
        self.dense = []
        for i, units in enumerate(dims):
            last = i == num_layers - 1
            self.dense.append(
                tf.keras.layers.Dense(
                    units,
                    activation=None if last else "relu",
                    kernel_initializer="zeros" if (last and zero_last) else "glorot_uniform",
                    name=f"layer{i}",
                    dtype=self.dtype,
                )
            )

    def call(self, x: tf.Tensor) -> tf.Tensor:
        for layer in self.dense:
            x = layer(x)
        return x


def sine_position_encoding(height: int, width: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """DETR-style normalized 2D sine encoding, shape [height, width, dim]"""
    num_feats = dim // 2
    y_embed = (np.arange(height, dtype=np.float64) + 0.5) / height * 2 * math.pi
    x_embed = (np.arange(width, dtype=np.float64) + 0.5) / width * 2 * math.pi
    dim_t = temperature ** (2 * (np.arange(num_feats) // 2) / num_feats)

    pos_x = x_embed[:, None] / dim_t
    pos_y = y_embed[:, None] / dim_t
    pos_x = np.stack([np.sin(pos_x[:, 0::2]), np.cos(pos_x[:, 1::2])], axis=2).reshape(width, -1)
    pos_y = np.stack([np.sin(pos_y[:, 0::2]), np.cos(pos_y[:, 1::2])], axis=2).reshape(height, -1)
    pos = np.concatenate(
        [np.broadcast_to(pos_y[:, None, :], (height, width, num_feats)),
         np.broadcast_to(pos_x[None, :, :], (height, width, num_feats))],
        axis=-1,
    )
    return pos


def box_sine_embedding(boxes: tf.Tensor, dim: int, temperature: float = 10000.0) -> tf.Tensor:
    """Sine embedding of CXCYWH reference boxes, [N, 4] -> [N, 2 * dim]"""
    num_feats = dim // 2
    dim_t = temperature ** (2 * (np.arange(num_feats) // 2) / num_feats)
    dim_t = tf.constant(dim_t, dtype=boxes.dtype)
    pos = boxes[:, :, None] * (2 * math.pi) / dim_t
    pos = tf.stack([tf.sin(pos[:, :, 0::2]), tf.cos(pos[:, :, 1::2])], axis=3)
    return tf.reshape(pos, (-1, 4 * num_feats))
