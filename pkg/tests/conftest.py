"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = CRITERIA.setdefault(number, {"title": title, "passed": True, "ran": False, "detail": ""})
    if call.when == "call":
        entry["ran"] = True
        entry["detail"] = dict(item.user_properties).get("detail", "")
    if call.excinfo is not None:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        e = CRITERIA[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        detail = f" ({e['detail']})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number} {e['title']}: {status}{detail}")
