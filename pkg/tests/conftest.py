import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tswatermark import lm  # noqa: E402


@pytest.fixture(scope="session")
def small_model():
    return lm.build_model(64, 8, 3)


@pytest.fixture(scope="session")
def model512():
    return lm.build_model(512, 32, 1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
