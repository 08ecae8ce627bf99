"""Shared test plumbing: the acceptance scorecard.

test_acceptance records one line per numbered criterion; the summary
hook prints the collected scorecard after the run so every criterion's
measured values stay visible in one block, pass or fail.
"""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance():
    """Returns record(criterion, passed, detail) for the scorecard."""

    def record(criterion, passed, detail):
        ACCEPTANCE_LINES.append(
            "%-3s %s  %s" % (criterion, "PASS" if passed else "FAIL", detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
