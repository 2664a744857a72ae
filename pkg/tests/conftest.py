import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(Path(__file__).resolve().parent))

ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def fixtures_dir():
    return ROOT / "fixtures"


@pytest.fixture(scope="session")
def configs_dir():
    return ROOT / "configs"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
