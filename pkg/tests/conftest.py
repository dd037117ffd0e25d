import numpy as np
import pytest

from kvcomp.trace import LayerShape, generate_synthetic_trace


@pytest.fixture
def small_shape():
    return LayerShape(num_layers=2, num_heads=2, head_dim=4)


@pytest.fixture
def small_trace(small_shape):
    return generate_synthetic_trace(small_shape, 8, 24, seed=11, outlier_channel_fraction=0.25, outlier_gain=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
