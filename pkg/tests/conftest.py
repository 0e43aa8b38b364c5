import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion_report():
    """Record one PASS/FAIL line per acceptance criterion; returns ``passed``."""

    def report(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
