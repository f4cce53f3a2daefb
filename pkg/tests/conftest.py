"""Collect acceptance outcomes and print one PASS/FAIL line per criterion."""

from collections import OrderedDict

import pytest

_results: "OrderedDict[int, dict]" = OrderedDict()


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    entry = _results.setdefault(number, {"title": "", "ok": True, "skipped": False, "notes": []})
    entry["title"] = dict(report.user_properties).get("title", entry["title"])
    if report.failed:
        entry["ok"] = False
    if report.skipped:
        entry["skipped"] = True
    if report.when == "call":
        entry["notes"].extend(v for k, v in report.user_properties if k == "measured")


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", marker.args[0])
        record_property("title", marker.args[1])


@pytest.fixture
def measured(record_property):
    """Attach a short measurement string to the acceptance summary line."""
    return lambda text: record_property("measured", text)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "SKIP" if entry.get("skipped") and entry["ok"] else ("PASS" if entry["ok"] else "FAIL")
        notes = "; ".join(entry["notes"])
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
