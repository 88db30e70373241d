import numpy as np
import pytest

_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """record(n, ok, detail) stores one PASS/FAIL line per criterion, echoed in the summary."""

    def record(number: int, ok: bool, detail: str, label: str | None = None):
        tag = label or ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {tag}  {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
