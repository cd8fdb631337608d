"""Collect acceptance outcomes and print one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args[0], marker.args[1] if len(marker.args) > 1 else ""
    entry = _OUTCOMES.setdefault(number, {"title": title, "ok": True, "failed": []})
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        entry = _OUTCOMES[number]
        verdict = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {number}: {verdict}  {entry['title']}"
        if entry["failed"]:
            line += f"  (failed: {', '.join(sorted(set(entry['failed'])))})"
        terminalreporter.write_line(line)
