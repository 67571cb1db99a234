import json
import os

import numpy as np
import pytest

ORACLE_DIR = os.path.join(os.path.dirname(__file__), "oracles")


@pytest.fixture(scope="session")
def frozen():
    with open(os.path.join(ORACLE_DIR, "frozen.json")) as fh:
        return json.load(fh)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from tests.test_acceptance import RESULTS
    except ImportError:
        import sys

        mod = sys.modules.get("test_acceptance")
        RESULTS = getattr(mod, "RESULTS", [])
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
