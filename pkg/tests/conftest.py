from __future__ import annotations

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Record one acceptance line; call before asserting so failures are reported too."""
    lines = request.config.stash.setdefault(_LINES, [])

    def _record(criterion: str, status, detail: str) -> None:
        if isinstance(status, bool):
            status = "PASS" if status else "FAIL"
        line = f"criterion {criterion:<3} {status:<4} {detail}"
        lines.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (int(s.split()[1].rstrip("abc")), s.split()[1])):
            terminalreporter.write_line(line)
