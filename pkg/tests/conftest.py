import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eventprop import yinyang

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    """A few hundred encoded Yin-Yang samples, shared across modules."""
    return yinyang.to_arrays(yinyang.make_dataset(400, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one summary line per acceptance criterion."""
    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
