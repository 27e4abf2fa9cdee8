import sys

import numpy as np
import pytest

from visionmoe.tensor import set_precision


@pytest.fixture(autouse=True)
def _ref64():
    set_precision("ref64")
    yield
    set_precision("ref64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
