"""Pytest plumbing: collects acceptance verdict lines and prints them in a
dedicated terminal section so every run ends with one pass/fail line per
acceptance criterion.
"""

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, line: str) -> None:
    ACCEPTANCE_LINES[number] = line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
