"""Shared fixtures: tiny model configurations and seeded random inputs."""

import numpy as np
import pytest

from tabdesk.model import ModelConfig, init_params

# smallest configuration that still has several heads and blocks in every stage
TINY = ModelConfig(
    d=8, cls_tokens=1, col_blocks=1, row_blocks=1, icl_blocks=2,
    col_heads=2, row_heads=2, icl_heads=2, inducing=4, n_quantiles=5, qassmax_hidden=4,
)
SMALL = ModelConfig(
    d=8, cls_tokens=2, col_blocks=2, row_blocks=2, icl_blocks=2,
    col_heads=2, row_heads=2, icl_heads=2, inducing=4, n_quantiles=9, qassmax_hidden=4,
)


def jitter(params, rng, scale=0.1):
    """Move every parameter off its initial value so no path is trivially zero."""
    for _, t in params:
        t.data = np.asarray(t.data + scale * rng.normal(size=t.data.shape))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="module")
def small_params():
    return jitter(init_params(SMALL, seed=3), np.random.default_rng(4))


@pytest.fixture(scope="module")
def tiny_params():
    return jitter(init_params(TINY, seed=1), np.random.default_rng(2))
