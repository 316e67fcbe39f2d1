import numpy as np
import pytest

from sse import tensor as tc
from sse.data import build_vocab, featurize_all
from sse.model import ModelConfig
from sse.synthetic import generate_synthetic


@pytest.fixture(autouse=True)
def float64():
    with tc.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides) -> ModelConfig:
    base = dict(hidden_dim=6, city_dim=6, categorical_dim=3, device_dim=2, numerical_dim=2,
                input_dropout=0.0, recurrent_dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


SMALL_CARDS = [9, 4, 5, 5, 32, 13, 3, 32, 32, 32, 4, 32, 6, 6]


@pytest.fixture(scope="session")
def synthetic_sessions():
    return generate_synthetic(300, 20, 4, seed=3)


@pytest.fixture(scope="session")
def synthetic_frames(synthetic_sessions):
    vocab = build_vocab(synthetic_sessions)
    return vocab, featurize_all(synthetic_sessions, vocab)
