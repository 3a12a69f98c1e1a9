import sys
from pathlib import Path

import numpy as np
import pytest

from canonpose.body_model import load_toy_model
from canonpose.fitting import FitConfig

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def model():
    return load_toy_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fast_cfg():
    """Cheaper stage-one search for unit tests."""
    return FitConfig(orientation_restarts=2)


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _CRITERIA.append(f"{name}: {status} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("_")[2])):
            terminalreporter.write_line(line)
