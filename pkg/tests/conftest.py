import numpy as np
import pytest

from qseg.model import ModelConfig, PromptSegModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(embed_dim=32, encoder_depth=2, num_heads=2,
                       decoder_dim=32)


@pytest.fixture
def tiny_model(tiny_config):
    return PromptSegModel(tiny_config, seed=0)


def fd_grad(f, x, h=1e-3):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


@pytest.fixture
def fd():
    return fd_grad
