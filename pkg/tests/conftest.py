"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        msg = str(report.longrepr).strip().splitlines()
        detail = (detail + " | " if detail else "") + (msg[-1] if msg else "error")
    _RESULTS[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail = _RESULTS[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title} -- {detail}")
