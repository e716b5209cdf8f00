"""Shared pytest hooks: acceptance verdict lines are echoed in the terminal summary."""

VERDICTS = []


def record_verdict(line):
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
