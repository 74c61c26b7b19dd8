"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line each."""

import pytest

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    decisive = report.when == "call" or not report.passed
    if not decisive:
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    number, title = marker.args
    if number not in _VERDICTS or status == "FAIL":
        _VERDICTS[number] = (title, status, dict(item.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, status, detail = _VERDICTS[number]
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
