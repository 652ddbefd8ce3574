import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, shape, floor=1e-6):
    """Dirichlet draws with entries kept above ``floor``."""
    w = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    w = np.maximum(w, floor)
    return w / w.sum(axis=-1, keepdims=True)


def random_tangent(rng, shape, scale=1.0):
    v = scale * rng.standard_normal(shape)
    return v - v.mean(axis=-1, keepdims=True)


# (criterion, verdict, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
