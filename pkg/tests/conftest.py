"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion at the end of the run."""
import pytest

_outcomes: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    info = getattr(report, "criterion", None)
    if info is None:
        return
    n, title = info
    entry = _outcomes.setdefault(n, {"title": title, "ok": True, "failed": []})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
        entry["failed"].append(report.nodeid.split("::")[-1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = "PASS" if e["ok"] else "FAIL"
        extra = "" if e["ok"] else f"  ({', '.join(e['failed'])})"
        terminalreporter.write_line(f"{status} criterion {n}: {e['title']}{extra}")
