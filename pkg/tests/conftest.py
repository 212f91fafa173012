import numpy as np
import pytest

from kvbudget import ModelConfig, build_model
from kvbudget.model import LayerState


def causal_rows(rng, h, w, n, alpha=1.0):
    """Random causal window rows ``(h, w, n)``; row j may attend to keys <= n - w + j."""
    out = np.zeros((h, w, n))
    for head in range(h):
        for j in range(w):
            limit = n - w + j + 1
            out[head, j, :limit] = rng.dirichlet(np.full(limit, alpha))
    return out


def state_from(attention, layer=0, column_mass=None):
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim == 2:
        attention = attention[None]
    return LayerState(layer=layer, attention=attention, column_mass=column_mass)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return build_model(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=32, seed=3))
