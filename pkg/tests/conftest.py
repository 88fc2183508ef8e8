from pathlib import Path

import pytest

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

_criteria: dict = {}


def record(number, ok, detail=""):
    """Store and print one acceptance verdict line."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    _criteria[number] = line
    print(line)
    return ok


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: (int(str(k).split(".")[0]), str(k))):
        terminalreporter.write_line(_criteria[key])
