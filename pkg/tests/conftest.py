import numpy as np
import pytest

from billiardlab.coding import build_window_table
from billiardlab.geometry import reference_configuration
from billiardlab.statistics import BilliardSampler
from billiardlab.symbolic import max_entropy_chain


@pytest.fixture(scope="session")
def ref():
    return reference_configuration()


@pytest.fixture(scope="session")
def table(ref):
    return build_window_table(ref)


@pytest.fixture(scope="session")
def chain():
    return max_entropy_chain(3)


@pytest.fixture(scope="session")
def sampler(table, chain):
    return BilliardSampler(table, chain)


@pytest.fixture
def rng():
    return np.random.default_rng(20241014)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(lines):
        terminalreporter.write_line(lines[num])
