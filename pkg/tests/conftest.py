import numpy as np
import pytest

from starshard import ModelConfig


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return ModelConfig(layers=2, hidden=16, vocab=256, heads=4, kv_heads=2, ffn_size=40)


@pytest.fixture
def gqa_cfg() -> ModelConfig:
    return ModelConfig(layers=4, hidden=32, vocab=256, heads=4, kv_heads=4, ffn_size=40)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
