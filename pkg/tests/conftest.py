import numpy as np
import pytest

from dmamp.model import SignalPrior, make_system, partition
from dmamp.spectral import gram_eigenvalues, stats_from_eigenvalues


@pytest.fixture
def prior():
    return SignalPrior(0.1)


@pytest.fixture
def small_system(prior):
    return make_system(64, 128, 10.0, 30.0, prior, K=4, seed=3)


@pytest.fixture
def small_stats(small_system):
    return stats_from_eigenvalues(gram_eigenvalues(small_system.A), small_system.N, 12)


@pytest.fixture
def small_shards(small_system):
    return partition(small_system)


def rel_dev(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))
