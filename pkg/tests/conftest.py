import re

import pytest

_KEY = pytest.StashKey[dict]()


def _status(passed):
    return "SKIP" if passed is None else "PASS" if passed else "FAIL"


@pytest.fixture
def criterion(request):
    """Record ``(name, passed, detail)`` for the acceptance summary; ``passed=None`` is a skip."""
    table = request.config.stash.setdefault(_KEY, {})

    def record(name, passed, detail=""):
        table[name] = (passed, detail)
        line = f"[{_status(passed)}] criterion {name}: {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_KEY, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(table, key=lambda s: (int(re.match(r"\d+", s).group()), s)):
        passed, detail = table[name]
        terminalreporter.write_line(f"{_status(passed)}  {name:6s} {detail}")
