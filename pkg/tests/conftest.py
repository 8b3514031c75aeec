import pytest

GATE_LINES = []


@pytest.fixture
def gate():
    """Record one pass/fail line per acceptance criterion; printed after the run."""
    def record(number, name, passed, detail=""):
        GATE_LINES.append((number, f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for _, line in sorted(GATE_LINES):
            terminalreporter.write_line(line)
