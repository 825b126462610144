import numpy as np
import pytest

import evovit as ev


@pytest.fixture
def tiny_cfg():
    # N=16 patches, C=8, 2 heads, depth 4
    return ev.EncoderConfig(16, 4, 1, 8, 2, 4, 10)


@pytest.fixture
def tiny_model(tiny_cfg):
    rng = ev.RngState(42)
    params = ev.init_params(tiny_cfg, rng)
    image = rng.uniform((16, 16, 1))
    return tiny_cfg, params, image


@pytest.fixture
def grad_cfg():
    # N=9, C=8, depth 2, 3 classes: the gradient-check config
    return ev.EncoderConfig(12, 4, 1, 8, 2, 2, 3)


def random_matrix(rng, rows, cols, lo=-1.0, hi=1.0):
    return lo + (hi - lo) * rng.uniform((rows, cols))
