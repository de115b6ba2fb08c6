import numpy as np
import pytest
import tensorflow as tf

from decola.config import ModelConfig
from decola.ml.layers import attention_stats
from decola.ml.model import DecolaDetector, seed_everything
from decola.utils.diagnostics import diagnostics
from decola.utils.shapes import ShapesWorldSpec, generate_shapes_dataset

MICRO_DIM = 16
MICRO_MODEL = dict(
    embed_dim=MICRO_DIM,
    encoder_layers=1,
    decoder_layers=2,
    num_heads=2,
    ffn_dim=32,
    stem_channels=(8, 8),
    queries_per_class=4,
    open_vocab_queries=8,
)


@pytest.fixture(autouse=True)
def reset_counters():
    diagnostics.reset()
    attention_stats.reset()
    yield


@pytest.fixture(scope="session")
def vocabulary():
    return ShapesWorldSpec().vocabulary(7, dim=MICRO_DIM)


@pytest.fixture
def micro_config():
    return ModelConfig(**MICRO_MODEL)


@pytest.fixture(scope="session")
def micro_model(vocabulary):
    seed_everything(0)
    return DecolaDetector(ModelConfig(**MICRO_MODEL), vocabulary, phase=1)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Tiny shapes dataset: 8 train, 4 val and 6 weak images of 64x64"""
    out = tmp_path_factory.mktemp("shapes")
    generate_shapes_dataset(seed=3, out_dir=str(out), n_train=8, n_val=4, n_weak=6, image_size=64, dim=MICRO_DIM)
    return out


@pytest.fixture
def float64():
    previous = tf.keras.backend.floatx()
    tf.keras.backend.set_floatx("float64")
    yield
    tf.keras.backend.set_floatx(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
