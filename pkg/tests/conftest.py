import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lowreg.volume import PhantomSpec, generate_phantom

settings.register_profile(
    "lowreg", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("lowreg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(dims=(32, 28, 24), magnitude=2.0, seed=5))


def central_fd(fun, x, idx, h):
    flat = x.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    up = fun(x)
    flat[idx] = old - h
    dn = fun(x)
    flat[idx] = old
    return (up - dn) / (2 * h)


def assert_fd(fun, x, grad, n, h, tol, rng, floor=1e-10):
    """Central differences at ``n`` random entries agree with ``grad`` to ``tol`` relative."""
    g = grad.reshape(-1)
    for idx in rng.choice(x.size, size=n, replace=False):
        fd = central_fd(fun, x, idx, h)
        scale = max(abs(fd), abs(g[idx]), floor)
        assert abs(fd - g[idx]) / scale <= tol, (idx, fd, g[idx])
