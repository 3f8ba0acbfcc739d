import numpy as np
import pytest
from hypothesis import settings

from fairmarkets import make_market

settings.register_profile("fairmarkets", max_examples=40, deadline=None)
settings.load_profile("fairmarkets")


def random_market(rng, n, m, budgets=False, supplies=False, groups=None):
    v = rng.uniform(0.05, 1.0, (n, m))
    B = rng.uniform(0.5, 2.0, n) if budgets else None
    s = rng.uniform(0.5, 2.0, m) if supplies else None
    return make_market(v, budgets=B, supplies=s, groups=groups)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def kkt_market():
    return make_market([[2.0, 1.0], [1.0, 2.0]], groups=[0, 1])
