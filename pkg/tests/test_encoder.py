import numpy as np
import pytest

from decola.errors import ImageError
from decola.ml.encoder import ImageEncoder, flatten_grid, grid_anchors, unflatten_grid


@pytest.fixture(scope="module")
def encoder():
    return ImageEncoder(embed_dim=16, num_levels=3, num_layers=1, num_heads=2, ffn_dim=32, stem_channels=(8, 8))


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(5).random((64, 64, 3)).astype(np.float32)


class TestEncodeImage:
    def test_level_shapes(self, encoder, image):
        grid = encoder.encode_image(image)
        assert grid.shapes == [(8, 8), (4, 4), (2, 2)]
        assert grid.dim == 16
        assert grid.image_size == (64, 64)
        assert [tuple(p.shape) for p in grid.positional_encodings] == [(8, 8, 16), (4, 4, 16), (2, 2, 16)]

    def test_levels_halve_with_floor(self, encoder):
        grid = encoder.encode_image(np.zeros((48, 48, 3), dtype=np.float32))
        assert grid.shapes == [(6, 6), (3, 3), (1, 1)]

    def test_zero_image_is_finite(self, encoder):
        grid = encoder.encode_image(np.zeros((64, 64, 3), dtype=np.float32))
        for level in grid.levels:
            assert np.isfinite(level.numpy()).all()

    def test_deterministic(self, encoder, image):
        first = encoder.encode_image(image)
        second = encoder.encode_image(image.copy())
        for a, b in zip(first.levels, second.levels):
            assert np.array_equal(a.numpy(), b.numpy())

    def test_feature_norm_band(self, encoder, image):
        flat = flatten_grid(encoder.encode_image(image))
        norms = np.linalg.norm(flat.features.numpy(), axis=-1)
        root = np.sqrt(16)
        assert np.all(norms >= 0.5 * root) and np.all(norms <= 2 * root)

    def test_too_small(self, encoder):
        with pytest.raises(ImageError):
            encoder.encode_image(np.zeros((16, 64, 3), dtype=np.float32))

    def test_wrong_channels(self, encoder):
        with pytest.raises(ImageError):
            encoder.encode_image(np.zeros((64, 64), dtype=np.float32))


class TestFlattenGrid:
    def test_length_and_order(self, encoder, image):
        grid = encoder.encode_image(image)
        flat = flatten_grid(grid)
        assert len(flat) == 64 + 16 + 4 == grid.num_locations
        assert flat.coordinates[0] == (0, 0, 0)
        assert flat.coordinates[1] == (0, 0, 1)
        assert flat.coordinates[8] == (0, 1, 0)
        assert flat.coordinates[64] == (1, 0, 0)
        assert len(set(flat.coordinates)) == len(flat)
        np.testing.assert_array_equal(flat.features.numpy()[9], grid.levels[0].numpy()[1, 1])

    def test_round_trip(self, encoder, image):
        grid = encoder.encode_image(image)
        restored = unflatten_grid(flatten_grid(grid))
        assert restored.shapes == grid.shapes
        for a, b in zip(restored.levels, grid.levels):
            assert np.array_equal(a.numpy(), b.numpy())

    def test_coarse_level_anchor(self, encoder, image):
        flat = flatten_grid(encoder.encode_image(image), anchor_scale=0.1)
        anchor = flat.anchors[flat.coordinates.index((2, 0, 0))]
        np.testing.assert_allclose(anchor[:2], [0.25, 0.25])
        assert anchor[2] == pytest.approx(0.4)

    def test_anchor_size_grows_with_level(self):
        anchors = grid_anchors([(2, 2), (1, 1)], anchor_scale=0.1)
        np.testing.assert_allclose(anchors[0], [0.25, 0.25, 0.1, 0.1])
        np.testing.assert_allclose(anchors[4], [0.5, 0.5, 0.2, 0.2])
