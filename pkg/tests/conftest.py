"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""
import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(ac\d+)_", report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _RESULTS[key] = (report.outcome == "passed", detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k[2:])):
        ok, detail, secs = _RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  ({secs:.1f}s) {detail}")
