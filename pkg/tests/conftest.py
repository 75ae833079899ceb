import math

import numpy as np
import pytest

from spinsense.geometry import default_geometry
from spinsense.simengine import default_calibration

OMEGA = 50.0 * math.pi

# criterion id -> (passed, detail); passed is None for report-only criteria
ACCEPTANCE_RESULTS: dict[str, tuple[bool | None, str]] = {}


@pytest.fixture(scope="session")
def geometry():
    return default_geometry()


@pytest.fixture(scope="session")
def calibration():
    return default_calibration()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0][1:])):
        passed, detail = ACCEPTANCE_RESULTS[key]
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"{status}  {key}: {detail}")
