"""
Box representations and differentiable box costs
"""
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np
import tensorflow as tf

from decola.errors import BoxFormatError

ArrayLike = Union[np.ndarray, tf.Tensor, list]


class BoxFormat(str, Enum):
    XYXY = "xyxy"
    CXCYWH = "cxcywh"


@dataclass(frozen=True)
class BoxSet:
    """Ordered boxes normalized to [0, 1] of `image_size` (height px, width px)"""

    boxes: np.ndarray
    format: BoxFormat
    image_size: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "format", BoxFormat(self.format))
        _validate(boxes, self.format)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def clip(self) -> "BoxSet":
        xyxy = np.clip(convert_format(self, BoxFormat.XYXY).boxes, 0.0, 1.0)
        return convert_format(BoxSet(xyxy, BoxFormat.XYXY, self.image_size), self.format)

    def to_pixels(self) -> np.ndarray:
        """XYXY boxes in pixel units of `image_size`"""
        height, width = self.image_size
        xyxy = convert_format(self, BoxFormat.XYXY).boxes
        return xyxy * np.array([width, height, width, height], dtype=np.float64)

    @classmethod
    def from_pixels(cls, xyxy: ArrayLike, image_size: Tuple[int, int]) -> "BoxSet":
        height, width = image_size
        boxes = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
        boxes = boxes / np.array([width, height, width, height], dtype=np.float64)
        return cls(boxes, BoxFormat.XYXY, image_size)


def _validate(boxes: np.ndarray, fmt: BoxFormat) -> None:
    finite = np.isfinite(boxes).all(axis=1)
    if not finite.all():
        index = int(np.flatnonzero(~finite)[0])
        raise BoxFormatError(f"Non-finite coordinate in box {index}: {boxes[index].tolist()}", box_index=index)
    if fmt == BoxFormat.XYXY:
        bad = (boxes[:, 2] < boxes[:, 0]) | (boxes[:, 3] < boxes[:, 1])
        reason = "x1 > x2 or y1 > y2"
    else:
        bad = (boxes[:, 2] < 0) | (boxes[:, 3] < 0)
        reason = "negative width or height"
    if bad.any():
        index = int(np.flatnonzero(bad)[0])
        raise BoxFormatError(f"Invalid {fmt.value} box {index} ({reason}): {boxes[index].tolist()}", box_index=index)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(boxes, dtype=np.float64), -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = np.moveaxis(np.asarray(boxes, dtype=np.float64), -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def convert_format(b: BoxSet, target: BoxFormat) -> BoxSet:
    target = BoxFormat(target)
    if b.format == target:
        return b
    if target == BoxFormat.XYXY:
        converted = cxcywh_to_xyxy(b.boxes)
    else:
        converted = xyxy_to_cxcywh(b.boxes)
    return BoxSet(converted, target, b.image_size)


def box_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU of XYXY arrays; an empty union counts as IoU 0"""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# TensorFlow versions (differentiable) used by matching and the losses

def box_cxcywh_to_xyxy(boxes: tf.Tensor) -> tf.Tensor:
    cx, cy, w, h = tf.unstack(boxes, axis=-1)
    return tf.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def box_xyxy_to_cxcywh(boxes: tf.Tensor) -> tf.Tensor:
    x0, y0, x1, y1 = tf.unstack(boxes, axis=-1)
    return tf.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _area(boxes: tf.Tensor) -> tf.Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def generalized_box_iou(boxes1: tf.Tensor, boxes2: tf.Tensor) -> tf.Tensor:
    """
    Pairwise GIoU of XYXY tensors, shape [N, M].

    Zero-area boxes are legal: an empty union gives IoU 0 and an empty
    enclosing box gives no penalty.
    """
    area1 = _area(boxes1)
    area2 = _area(boxes2)

    lt = tf.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = tf.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = tf.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    iou = tf.math.divide_no_nan(inter, union)

    lt_c = tf.minimum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb_c = tf.maximum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh_c = tf.maximum(rb_c - lt_c, 0.0)
    area_c = wh_c[..., 0] * wh_c[..., 1]

    return iou - tf.math.divide_no_nan(area_c - union, area_c)


def generalized_box_iou_matched(boxes1: tf.Tensor, boxes2: tf.Tensor) -> tf.Tensor:
    """GIoU of aligned pairs, shape [N]"""
    area1 = _area(boxes1)
    area2 = _area(boxes2)

    wh = tf.maximum(tf.minimum(boxes1[:, 2:], boxes2[:, 2:]) - tf.maximum(boxes1[:, :2], boxes2[:, :2]), 0.0)
    inter = wh[:, 0] * wh[:, 1]
    union = area1 + area2 - inter
    iou = tf.math.divide_no_nan(inter, union)

    wh_c = tf.maximum(tf.maximum(boxes1[:, 2:], boxes2[:, 2:]) - tf.minimum(boxes1[:, :2], boxes2[:, :2]), 0.0)
    area_c = wh_c[:, 0] * wh_c[:, 1]
    return iou - tf.math.divide_no_nan(area_c - union, area_c)


def box_l1_distance(boxes1: tf.Tensor, boxes2: tf.Tensor) -> tf.Tensor:
    """Pairwise sum of absolute coordinate differences, shape [N, M]"""
    return tf.reduce_sum(tf.abs(boxes1[:, None, :] - boxes2[None, :, :]), axis=-1)


def generalized_iou(a: BoxSet, b: BoxSet) -> np.ndarray:
    if a.format != BoxFormat.XYXY or b.format != BoxFormat.XYXY:
        raise BoxFormatError(f"generalized_iou expects xyxy boxes (got {a.format.value}, {b.format.value})")
    return generalized_box_iou(tf.constant(a.boxes), tf.constant(b.boxes)).numpy()


def l1_box_distance(a: BoxSet, b: BoxSet) -> np.ndarray:
    if a.format != BoxFormat.CXCYWH or b.format != BoxFormat.CXCYWH:
        raise BoxFormatError(f"l1_box_distance expects cxcywh boxes (got {a.format.value}, {b.format.value})")
    return box_l1_distance(tf.constant(a.boxes), tf.constant(b.boxes)).numpy()


def inverse_sigmoid(x: tf.Tensor, eps: float = 1e-5) -> tf.Tensor:
    x = tf.clip_by_value(x, 0.0, 1.0)
    x1 = tf.maximum(x, eps)
    x2 = tf.maximum(1.0 - x, eps)
    return tf.math.log(x1 / x2)
