import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def record_criterion():
    """Log one acceptance line; the summary prints them after the run."""

    def record(number, title, passed: bool | None, detail: str = ""):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        _CRITERIA.append(f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
