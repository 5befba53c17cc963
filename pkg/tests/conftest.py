import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from foreswe.data import generate_synthetic

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """6 stations, 5 years: enough for buffer/train/test splits."""
    return generate_synthetic(6, 5, seed=3)


CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns ``ok`` for the caller to assert."""
    lines = request.config.stash[CRITERIA]

    def record(name, ok, detail):
        line = f"{name}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
