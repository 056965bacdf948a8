"""Shared pytest plumbing for the suite.

Acceptance-style tests record one verdict line each; the lines are echoed
in a terminal section at the end of the run so a plain ``pytest`` shows a
compact pass/fail summary even when output capture is on.
"""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record ``[PASS|FAIL] name: detail`` and assert the outcome."""

    def _record(name: str, ok: bool, detail: str) -> None:
        _VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance checks")
        for line in sorted(_VERDICTS, key=lambda s: s.split("] ", 1)[1]):
            terminalreporter.write_line(line)
