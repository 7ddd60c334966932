from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nscr.facts import default_registry  # noqa: E402

DATA = resources.files("nscr.data")
ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def reg():
    return default_registry()


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return Path(str(DATA))


def read_data(name: str) -> str:
    return DATA.joinpath(name).read_text(encoding="utf-8")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
