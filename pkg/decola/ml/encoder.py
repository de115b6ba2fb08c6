"""
Image encoder producing multi-scale grid features x_{i,j}
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import tensorflow as tf

from decola.errors import ImageError
from decola.ml.layers import FeedForward, MultiHeadAttention, sine_position_encoding

MIN_IMAGE_SIZE = 32
STEM_STRIDE = 8


@dataclass
class FeatureGrid:
    levels: List[tf.Tensor]  # [H_l, W_l, d]
    positional_encodings: List[tf.Tensor]
    image_size: Tuple[int, int]

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [(int(level.shape[0]), int(level.shape[1])) for level in self.levels]

    @property
    def dim(self) -> int:
        return int(self.levels[0].shape[-1])

    @property
    def num_locations(self) -> int:
        return sum(h * w for h, w in self.shapes)


@dataclass
class FlatGrid:
    """Level-major, row-major flattening of a FeatureGrid"""

    features: tf.Tensor  # [N, d]
    coordinates: List[Tuple[int, int, int]]  # (level, i, j)
    anchors: np.ndarray  # [N, 4] CXCYWH
    positional: tf.Tensor  # [N, d]
    shapes: List[Tuple[int, int]]
    image_size: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.coordinates)


def grid_anchors(shapes: List[Tuple[int, int]], anchor_scale: float = 0.1) -> np.ndarray:
    """One CXCYWH anchor per cell, centered on the cell, side anchor_scale * 2**level"""
    anchors = []
    for level, (height, width) in enumerate(shapes):
        ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        cx = (xs.reshape(-1) + 0.5) / width
        cy = (ys.reshape(-1) + 0.5) / height
        side = np.full_like(cx, min(anchor_scale * 2.0 ** level, 0.95), dtype=np.float64)
        anchors.append(np.stack([cx, cy, side, side], axis=-1))
    return np.concatenate(anchors, axis=0) if anchors else np.zeros((0, 4))


def flatten_grid(g: FeatureGrid, anchor_scale: float = 0.1) -> FlatGrid:
    coordinates = [
        (level, i, j)
        for level, (height, width) in enumerate(g.shapes)
        for i in range(height)
        for j in range(width)
    ]
    features = tf.concat([tf.reshape(level, (-1, g.dim)) for level in g.levels], axis=0)
    positional = tf.concat([tf.reshape(pos, (-1, g.dim)) for pos in g.positional_encodings], axis=0)
    return FlatGrid(features, coordinates, grid_anchors(g.shapes, anchor_scale), positional, g.shapes, g.image_size)


def unflatten_grid(flat: FlatGrid) -> FeatureGrid:
    sizes = [h * w for h, w in flat.shapes]
    features = tf.split(flat.features, sizes, axis=0)
    positional = tf.split(flat.positional, sizes, axis=0)
    dim = int(flat.features.shape[-1])
    return FeatureGrid(
        levels=[tf.reshape(f, (h, w, dim)) for f, (h, w) in zip(features, flat.shapes)],
        positional_encodings=[tf.reshape(p, (h, w, dim)) for p, (h, w) in zip(positional, flat.shapes)],
        image_size=flat.image_size,
    )


class EncoderLayer(tf.keras.layers.Layer):
    def __init__(self, embed_dim: int, num_heads: int, ffn_dim: int, dropout: float = 0.0, **kwargs):
        super().__init__(**kwargs)
        self.self_attn = MultiHeadAttention(embed_dim, num_heads, dropout, name="self_attn", dtype=self.dtype)
        self.norm1 = tf.keras.layers.LayerNormalization(epsilon=1e-5, name="norm1", dtype=self.dtype)
        self.ffn = FeedForward(embed_dim, ffn_dim, dropout, name="ffn", dtype=self.dtype)
        self.norm2 = tf.keras.layers.LayerNormalization(epsilon=1e-5, name="norm2", dtype=self.dtype)

    def call(self, src: tf.Tensor, pos: tf.Tensor, training: bool = False) -> tf.Tensor:
        q = src + pos
        src = self.norm1(src + self.self_attn(q, q, src, training=training))
        return self.norm2(src + self.ffn(src, training=training))


class ImageEncoder(tf.keras.layers.Layer):
    """
    Convolutional stem (three stride-2 blocks) followed by extra stride-2 levels
    and dense transformer-encoder layers over all grid tokens.
    """

    def __init__(
        self,
        embed_dim: int = 64,
        num_levels: int = 3,
        num_layers: int = 2,
        num_heads: int = 4,
        ffn_dim: int = 1024,
        dropout: float = 0.0,
        stem_channels: Tuple[int, int] = (32, 48),
        **kwargs,
    ):
        super().__init__(**kwargs)
        self.embed_dim = embed_dim
        self.num_levels = num_levels
        self.stem = [
            tf.keras.layers.Conv2D(c, 3, strides=2, padding="same", activation="relu", name=f"stem{i}", dtype=self.dtype)
            for i, c in enumerate(list(stem_channels) + [embed_dim])
        ]
        self.downsample = [
            tf.keras.layers.Conv2D(embed_dim, 2, strides=2, padding="valid", name=f"down{i}", dtype=self.dtype)
            for i in range(1, num_levels)
        ]
        self.input_proj = [tf.keras.layers.Dense(embed_dim, name=f"input_proj{i}", dtype=self.dtype) for i in range(num_levels)]
        self.input_norm = [
            tf.keras.layers.LayerNormalization(epsilon=1e-5, name=f"input_norm{i}", dtype=self.dtype)
            for i in range(num_levels)
        ]
        self.layers_ = [
            EncoderLayer(embed_dim, num_heads, ffn_dim, dropout, name=f"layer{i}", dtype=self.dtype)
            for i in range(num_layers)
        ]

    def build(self, input_shape):
        self.level_embed = self.add_weight(
            name="level_embed",
            shape=(self.num_levels, self.embed_dim),
            initializer=tf.keras.initializers.RandomNormal(stddev=0.02),
            dtype=self.dtype,
        )
        super().build(input_shape)

    def call(self, images: tf.Tensor, training: bool = False) -> FeatureGrid:
        """`images` is [1, H, W, 3] in [0, 1]"""
        height, width = int(images.shape[1]), int(images.shape[2])
        x = tf.cast(images, self.dtype) - 0.5
        for conv in self.stem:
            x = conv(x)

        maps = [x]
        for conv in self.downsample:
            maps.append(conv(maps[-1]))

        tokens, positions, shapes = [], [], []
        for level, feature_map in enumerate(maps):
            h, w = int(feature_map.shape[1]), int(feature_map.shape[2])
            shapes.append((h, w))
            projected = self.input_norm[level](self.input_proj[level](feature_map))
            tokens.append(tf.reshape(projected, (1, h * w, self.embed_dim)))
            pos = tf.constant(sine_position_encoding(h, w, self.embed_dim), dtype=self.dtype)
            positions.append(tf.reshape(pos, (1, h * w, self.embed_dim)) + self.level_embed[level])

        src = tf.concat(tokens, axis=1)
        pos = tf.concat(positions, axis=1)
        for layer in self.layers_:
            src = layer(src, pos, training=training)

        sizes = [h * w for h, w in shapes]
        levels = [tf.reshape(t, (h, w, self.embed_dim)) for t, (h, w) in zip(tf.split(src[0], sizes), shapes)]
        pos_levels = [tf.reshape(p, (h, w, self.embed_dim)) for p, (h, w) in zip(tf.split(pos[0], sizes), shapes)]
        return FeatureGrid(levels, pos_levels, (height, width))

    def encode_image(self, img: np.ndarray, training: bool = False) -> FeatureGrid:
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ImageError(f"Expected an H x W x 3 image (got shape {tuple(img.shape)})")
        if img.shape[0] < MIN_IMAGE_SIZE or img.shape[1] < MIN_IMAGE_SIZE:
            raise ImageError(
                f"Image {img.shape[0]}x{img.shape[1]} is smaller than the minimum {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}",
                height=int(img.shape[0]),
                width=int(img.shape[1]),
            )
        return self(tf.constant(img[None, ...]), training=training)
