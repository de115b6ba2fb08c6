import numpy as np
import pytest
import tensorflow as tf

from decola.errors import BoxFormatError
from decola.ml.geometry import (
    BoxFormat,
    BoxSet,
    box_iou,
    convert_format,
    generalized_box_iou,
    generalized_iou,
    inverse_sigmoid,
    l1_box_distance,
)


def xyxy(*boxes):
    return BoxSet(np.array(boxes, dtype=np.float64), BoxFormat.XYXY)


def cxcywh(*boxes):
    return BoxSet(np.array(boxes, dtype=np.float64), BoxFormat.CXCYWH)


class TestConvertFormat:
    def test_unit_box(self):
        converted = convert_format(xyxy([0, 0, 1, 1]), BoxFormat.CXCYWH)
        np.testing.assert_allclose(converted.boxes, [[0.5, 0.5, 1.0, 1.0]])
        assert converted.format == BoxFormat.CXCYWH

    def test_same_format_is_identity(self):
        boxes = xyxy([0.1, 0.2, 0.3, 0.4])
        assert convert_format(boxes, BoxFormat.XYXY) is boxes

    def test_round_trip(self, rng):
        corners = np.sort(rng.random((100, 2, 2)), axis=1)
        boxes = xyxy(*np.concatenate([corners[:, 0], corners[:, 1]], axis=1))
        back = convert_format(convert_format(boxes, BoxFormat.CXCYWH), BoxFormat.XYXY)
        np.testing.assert_allclose(back.boxes, boxes.boxes, atol=1e-12)

    def test_zero_area_box_is_legal(self):
        converted = convert_format(xyxy([0.3, 0.3, 0.3, 0.3]), BoxFormat.CXCYWH)
        np.testing.assert_allclose(converted.boxes, [[0.3, 0.3, 0.0, 0.0]])

    def test_inverted_box_rejected(self):
        with pytest.raises(BoxFormatError) as excinfo:
            xyxy([0, 0, 1, 1], [0.5, 0.5, 0.2, 0.9])
        assert excinfo.value.box_index == 1

    def test_negative_width_rejected(self):
        with pytest.raises(BoxFormatError):
            cxcywh([0.5, 0.5, -0.1, 0.2])

    def test_non_finite_rejected(self):
        with pytest.raises(BoxFormatError) as excinfo:
            xyxy([0, 0, np.nan, 1])
        assert excinfo.value.box_index == 0

    def test_pixels_round_trip(self):
        boxes = BoxSet.from_pixels([[8, 16, 32, 48]], (64, 64))
        np.testing.assert_allclose(boxes.boxes, [[0.125, 0.25, 0.5, 0.75]])
        np.testing.assert_allclose(boxes.to_pixels(), [[8, 16, 32, 48]])


class TestGeneralizedIoU:
    def test_identical_boxes(self):
        assert generalized_iou(xyxy([0.1, 0.1, 0.4, 0.6]), xyxy([0.1, 0.1, 0.4, 0.6]))[0, 0] == pytest.approx(1.0)

    def test_overlapping_squares(self):
        value = generalized_iou(xyxy([0, 0, 2, 2]), xyxy([1, 1, 3, 3]))[0, 0]
        assert value == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)
        assert value == pytest.approx(-0.0794, abs=1e-4)

    def test_far_disjoint_is_negative(self):
        near = generalized_iou(xyxy([0, 0, 0.1, 0.1]), xyxy([0.2, 0.2, 0.3, 0.3]))[0, 0]
        far = generalized_iou(xyxy([0, 0, 0.1, 0.1]), xyxy([0.9, 0.9, 1, 1]))[0, 0]
        assert far < near < 0
        assert far > -1

    def test_bounded(self, rng):
        corners = np.sort(rng.random((50, 2, 2)), axis=1)
        boxes = np.concatenate([corners[:, 0], corners[:, 1]], axis=1)
        values = generalized_iou(xyxy(*boxes[:25]), xyxy(*boxes[25:]))
        assert values.shape == (25, 25)
        assert np.all(values >= -1 - 1e-12) and np.all(values <= 1 + 1e-12)

    def test_equals_iou_when_nested(self):
        outer, inner = [0, 0, 1, 1], [0.25, 0.25, 0.75, 0.75]
        giou = generalized_iou(xyxy(outer), xyxy(inner))[0, 0]
        assert giou == pytest.approx(box_iou(np.array([outer]), np.array([inner]))[0, 0])

    def test_zero_area_boxes_are_finite(self):
        value = generalized_iou(xyxy([0.5, 0.5, 0.5, 0.5]), xyxy([0.5, 0.5, 0.5, 0.5]))
        assert np.isfinite(value).all()

    def test_requires_xyxy(self):
        with pytest.raises(BoxFormatError):
            generalized_iou(cxcywh([0.5, 0.5, 0.2, 0.2]), xyxy([0, 0, 1, 1]))

    def test_differentiable(self):
        a = tf.Variable([[0.1, 0.1, 0.5, 0.5]], dtype=tf.float64)
        b = tf.constant([[0.2, 0.2, 0.6, 0.7]], dtype=tf.float64)
        with tf.GradientTape() as tape:
            value = tf.reduce_sum(generalized_box_iou(a, b))
        grad = tape.gradient(value, a)
        assert np.isfinite(grad.numpy()).all()
        assert np.abs(grad.numpy()).sum() > 0

    def test_gradient_matches_finite_differences(self, rng):
        step = 1e-7
        for _ in range(100):
            corners = rng.uniform(0.0, 0.6, (2, 2))
            sizes = rng.uniform(0.05, 0.4, (2, 2))
            pair = np.concatenate([corners, corners + sizes], axis=1).reshape(-1)

            def giou(flat):
                boxes = tf.reshape(flat, (2, 4))
                return generalized_box_iou(boxes[:1], boxes[1:])[0, 0]

            flat = tf.Variable(pair, dtype=tf.float64)
            with tf.GradientTape() as tape:
                value = giou(flat)
            analytic = tape.gradient(value, flat).numpy()

            numeric = np.empty_like(pair)
            for i in range(pair.size):
                offset = np.zeros_like(pair)
                offset[i] = step
                numeric[i] = (float(giou(tf.constant(pair + offset))) - float(giou(tf.constant(pair - offset)))) / (2 * step)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


class TestL1Distance:
    def test_shifted_box(self):
        value = l1_box_distance(cxcywh([0.5, 0.5, 0.2, 0.2]), cxcywh([0.6, 0.5, 0.2, 0.2]))
        assert value[0, 0] == pytest.approx(0.1)

    def test_symmetric(self, rng):
        a, b = cxcywh(*rng.random((4, 4))), cxcywh(*rng.random((3, 4)))
        np.testing.assert_allclose(l1_box_distance(a, b), l1_box_distance(b, a).T)

    def test_requires_cxcywh(self):
        with pytest.raises(BoxFormatError):
            l1_box_distance(xyxy([0, 0, 1, 1]), cxcywh([0.5, 0.5, 1, 1]))


def test_inverse_sigmoid_round_trip():
    x = tf.constant([0.1, 0.5, 0.9], dtype=tf.float64)
    np.testing.assert_allclose(tf.sigmoid(inverse_sigmoid(x)).numpy(), x.numpy(), atol=1e-9)
