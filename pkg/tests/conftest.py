import numpy as np
import pytest

from drfpn import autograd as ag
from drfpn.autograd import Tensor
from drfpn.params import ModelParams


def randomize_zero_params(params: ModelParams, seed: int, scale: float = 0.3) -> ModelParams:
    """Give zero-initialized tensors (heads, biases) random values so every path is exercised."""
    rng = np.random.default_rng(seed)
    for t in params.values():
        if not np.any(t.data):
            t.data = scale * rng.standard_normal(t.shape)
    return params


def weighted_sum_loss(shape, seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape))
    return lambda y: ag.sum(ag.mul(y, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
