"""Shared pytest plumbing: the acceptance pass/fail summary."""

_acceptance_lines = []


def acceptance_line(line: str):
    """Record a one-line verdict, echoed in the terminal summary."""
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
