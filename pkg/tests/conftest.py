import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from microshed.config import bundled_scenario  # noqa: E402


@pytest.fixture(scope="session")
def case1():
    return bundled_scenario("case1")


@pytest.fixture(scope="session")
def case2():
    return bundled_scenario("case2")


ACCEPTANCE: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
