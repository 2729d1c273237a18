import pytest

_REPORT: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record an acceptance outcome: ``criterion(name, passed, detail)``."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        _REPORT.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _REPORT:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
