import json

import pytest

from gridtide import bundled_case_path, initialize, load_bundled
from gridtide.control import build_fleet


@pytest.fixture(scope="session")
def ne39():
    case, _ = initialize(load_bundled())
    return case


@pytest.fixture(scope="session")
def ne39_doc():
    return json.loads(bundled_case_path().read_text())


@pytest.fixture(scope="session")
def fleet_1pct(ne39):
    return build_fleet(ne39, 50_000)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction (minutes or more)")


CRITERIA_LOG: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA_LOG.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LOG:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LOG, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
