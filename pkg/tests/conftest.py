import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from selbounds.core import SupportTable, WeightBox

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def worked_table():
    """f = (1, 7, 10), g = 1, uniform mass."""
    return SupportTable.from_arrays([1.0, 7.0, 10.0], [1.0, 1.0, 1.0], count=[1, 1, 1])


@pytest.fixture
def unit_box():
    return WeightBox.from_weights(1.0, 2.0)


def random_table(rng, K, mixed_sign_g=False, n=None):
    f = rng.normal(size=K)
    if mixed_sign_g:
        g = rng.normal(size=K)
    else:
        g = rng.uniform(0.2, 2.0, size=K) * rng.choice([1.0, 1.0, 1.0], size=K)
    p = rng.dirichlet(np.ones(K))
    return SupportTable.from_arrays(f, g, p, n=n or 10 * K)


def random_box(rng):
    lo = rng.uniform(1.0, 3.0)
    return WeightBox.from_weights(lo, lo * rng.uniform(1.0, 6.0))
