import os
import sys

import networkx as nx
import numpy as np
import pytest

# Make the averaging package importable
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'scripts'))

from averaging.stochastic_core import StochasticMatrix, identity, make_stochastic  # noqa: E402
from averaging.chains import static_chain  # noqa: E402

MEDIAN_ANCHORS = [-2.0, -1.0, 0.0, 1.0, 2.0]


def random_stochastic(rng: np.random.Generator, n: int, sparsity: float = 0.3) -> StochasticMatrix:
    """Random row-stochastic matrix with some exact zeros"""
    a = rng.random((n, n)) * (rng.random((n, n)) > sparsity)
    a[np.arange(n), rng.integers(n, size=n)] += rng.random(n) + 1e-3
    return make_stochastic(a / a.sum(axis=1, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cycle5():
    return nx.cycle_graph(5)


@pytest.fixture
def identity_chain():
    """Negative control: no cross edges, never mixes"""
    return static_chain(identity(5), seed=0)


@pytest.fixture
def lopsided_chain():
    """Negative control: row-stochastic but columns sum to 1.5 and 0.5"""
    return static_chain(make_stochastic([[0.5, 0.5], [1.0, 0.0]]), seed=0)
