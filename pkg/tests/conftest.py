import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pemgrid.grid import bundled_network, load_grid  # noqa: E402


@pytest.fixture(scope="session")
def five_bus():
    return load_grid(bundled_network("five_bus"))


@pytest.fixture(scope="session")
def single_bus():
    return load_grid(bundled_network("single_bus"))


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; assert after calling so failures are listed too."""
    def record(name, ok, detail=""):
        _VERDICTS.append((name, bool(ok), detail))
        print(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
