import numpy as np
import pytest

from viewlm.model import Model, ModelConfig, TransformerWeights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(seed=0, **overrides) -> Model:
    """Small random model; override config fields per test."""
    config = ModelConfig(**{"n_layers": 2, "n_heads": 2, "d_model": 16, "d_ff": 32,
                            "n_vocab": 261, "max_seq_len": 64, **overrides})
    weights = TransformerWeights.init_random(config, np.random.default_rng(seed))
    return Model(config, weights)


@pytest.fixture
def tiny_model() -> Model:
    return make_model()
