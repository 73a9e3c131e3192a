"""Shared pytest plumbing: an always-visible acceptance summary."""

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    """Register a one-line verdict shown in the terminal summary."""
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
