import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from fobmaml.tasks import QuadraticTask

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_spd(rng, d, lo=0.1, hi=1.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    A = (q * rng.uniform(lo, hi, d)) @ q.T
    return 0.5 * (A + A.T)


def random_task(rng, d, lo=0.1, hi=1.0, split=False):
    A = random_spd(rng, d, lo, hi)
    b = rng.standard_normal(d)
    if split:
        return QuadraticTask(A, b, random_spd(rng, d, lo, hi), rng.standard_normal(d))
    return QuadraticTask(A, b)


seeds = st.integers(min_value=0, max_value=2**32 - 1)
dims = st.integers(min_value=1, max_value=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
