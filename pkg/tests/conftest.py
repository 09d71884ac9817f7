"""Shared pytest plumbing.

Acceptance tests register one verdict line each via ``record_criterion``;
the collected lines are echoed in the terminal summary so a full run ends
with one PASS/FAIL line per criterion regardless of output capturing.
"""

_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
