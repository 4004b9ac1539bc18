import mpmath
import pytest
from hypothesis import HealthCheck, settings

from cocycle_kam.arithmetic import ContinuedFraction, expand_cf, parse_alpha

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

LIOUVILLE_QUOTIENTS = (1, 20, 1, 2000, 1, 2_000_000)


@pytest.fixture(scope="session")
def golden():
    return parse_alpha("expr:golden")


@pytest.fixture(scope="session")
def golden_cf(golden):
    return expand_cf(golden, 10 ** 8)


@pytest.fixture(scope="session")
def liouville_cf():
    return ContinuedFraction.from_quotients(list(LIOUVILLE_QUOTIENTS), max_q=10 ** 13)


def mp_alpha(x: float):
    with mpmath.workprec(256):
        return mpmath.mpf(x)
