import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_law(values):
    """{value: count} of an integer array."""
    u, c = np.unique(np.asarray(values), return_counts=True)
    return dict(zip(u.tolist(), c.tolist()))
