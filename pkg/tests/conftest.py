import pytest

_LINES: list = []


@pytest.fixture
def criterion():
    """``criterion(k, passed, detail)`` records one acceptance line and prints it."""

    def record(k: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {k}: {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
