import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    ok = _CRITERIA.get(number, (title, True))[1]
    if rep.when == "call" or rep.failed:
        ok = ok and rep.passed
    _CRITERIA[number] = (title, ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")
    config.addinivalue_line("markers", "slow: long-running check")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
