"""Shared fixtures: certification verdict collection and reporting."""

import pytest

VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record and assert one PASS/FAIL line per certification check."""

    def emit(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        VERDICTS.append(line)
        print(line, flush=True)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("certification verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
