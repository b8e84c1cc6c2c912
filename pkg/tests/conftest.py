"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "details": []})
    if report.failed:
        entry["ok"] = False
        entry["details"].append(f"{item.name} failed")
    if report.when == "call":
        entry["details"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number} {status}: {entry['title']}" + (f" ({detail})" if detail else ""))
