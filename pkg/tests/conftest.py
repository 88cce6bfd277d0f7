import numpy as np
import pytest

from stvf.studies import build_operators


@pytest.fixture(scope="session")
def operators():
    """Cached (mesh, M, A) bundles per mesh size."""
    cache = {}

    def get(n):
        if n not in cache:
            cache[n] = build_operators(n)
        return cache[n]

    return get


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
