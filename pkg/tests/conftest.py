"""Shared pytest hooks.

The acceptance tests record one PASS or FAIL line per shipping criterion.
Default output capture would hide those lines on success, so they are
replayed here as a dedicated section of the terminal summary.
"""

acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter):
    if not acceptance_verdicts:
        return
    terminalreporter.section("acceptance gate")
    for line in acceptance_verdicts:
        terminalreporter.write_line(line)
