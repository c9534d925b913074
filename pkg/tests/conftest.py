"""Collects the outcome of each acceptance criterion and prints one line per criterion."""
import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    if report.when != "call" and not (report.failed or report.skipped):
        return
    outcome = "FAIL" if report.failed else ("SKIP" if report.skipped else "PASS")
    prev = _RESULTS.get(key)
    if prev is not None and prev[0] == "FAIL":
        return
    notes = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    _RESULTS[key] = (outcome, m.group(2).replace("_", " "), notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS):
        outcome, name, notes = _RESULTS[key]
        line = f"ACCEPTANCE {key:2d} {outcome}  {name}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
