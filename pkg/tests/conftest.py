"""Shared fixtures plus the acceptance-criteria summary printer."""

from __future__ import annotations

import pytest

_ACCEPTANCE_RESULTS: dict[int, str] = {}
_ACCEPTANCE_TOTAL = 8


@pytest.fixture
def acceptance():
    """Record a criterion's outcome; the terminal summary prints one line each."""

    def record(criterion: int, description: str) -> None:
        _ACCEPTANCE_RESULTS[criterion] = description

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in range(1, _ACCEPTANCE_TOTAL + 1):
        if criterion in _ACCEPTANCE_RESULTS:
            terminalreporter.write_line(
                f"criterion {criterion}: PASS - {_ACCEPTANCE_RESULTS[criterion]}"
            )
        else:
            terminalreporter.write_line(
                f"criterion {criterion}: FAIL or not run"
            )
