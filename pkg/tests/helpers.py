import numpy as np
import tensorflow as tf

from decola.ml.encoder import FlatGrid, grid_anchors


def make_grid(features, shapes=None) -> FlatGrid:
    """FlatGrid over given features with zero positional encodings"""
    features = np.asarray(features, dtype=np.float32)
    shapes = shapes or [(1, features.shape[0])]
    coordinates = [(level, i, j) for level, (h, w) in enumerate(shapes) for i in range(h) for j in range(w)]
    return FlatGrid(
        features=tf.constant(features),
        coordinates=coordinates,
        anchors=grid_anchors(shapes),
        positional=tf.zeros_like(features),
        shapes=shapes,
        image_size=(64, 64),
    )
