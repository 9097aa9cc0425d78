import numpy as np
import pytest

from hrtf_scnn.data import fibonacci_grid, split_known
from hrtf_scnn.network import init_model
from hrtf_scnn.sh import build_sh_matrix


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bandlimited_field(grid, order, channels, rng):
    a = rng.standard_normal(((order + 1) ** 2, channels))
    return build_sh_matrix(grid, order).values @ a, a


def tiny_model(seed=0, bias=True, zero=False):
    """P_sparse=20, P_dense=48, L=3, SH order 2, u=3."""
    dense = fibonacci_grid(48)
    ks = split_known(dense, 20, seed=seed, order=2)
    params = init_model(ks.known, dense, 3, n_map_in=2, n_conv=2, n_map_out=2, bias=bias, seed=seed, zero=zero)
    return params, ks


@pytest.fixture
def tiny():
    return tiny_model()
