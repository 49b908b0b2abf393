import numpy as np
import pytest
from hypothesis import settings

from chunkcomp.model import POSITION_MONITOR, ModelConfig, init_from_seed

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    return ModelConfig(n_layers=2, n_heads=2, d_head=8, vocab_size=32, max_train_positions=48)


@pytest.fixture
def small_weights(small_cfg):
    return init_from_seed(small_cfg, 7, gain=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _reset_monitor():
    POSITION_MONITOR.reset()
    yield
