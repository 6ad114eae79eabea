"""Pytest hooks for the acceptance checklist.

Tests marked ``@pytest.mark.criterion(num, text)`` feed a summary block
printed at the end of the session: one PASS or FAIL line per criterion,
in numeric order.  A criterion whose setup fails (for example because a
training fixture diverged) is reported FAIL rather than dropped.
"""

import sys

import pytest

sys.path.insert(0, str(__import__("pathlib").Path(__file__).resolve().parent))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, text): acceptance criterion checked by this test",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num = int(marker.args[0])
    text = str(marker.args[1])
    prev = _CRITERIA.get(num)
    if report.when == "setup" and report.failed:
        _CRITERIA[num] = (False, text)
    elif report.when == "call":
        ok = report.passed
        if prev is not None and not prev[0]:
            ok = False
        _CRITERIA[num] = (ok, text)
    elif report.when == "setup" and report.skipped and prev is None:
        _CRITERIA[num] = (False, text + " (skipped)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        ok, text = _CRITERIA[num]
        status = "PASS" if ok else "FAIL"
        tr.write_line("criterion %02d [%s] %s" % (num, status, text))
