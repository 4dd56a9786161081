"""Per-criterion summary for tests marked ``acceptance(k, title)``."""

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    k, title = mark.args
    entry = _RESULTS.setdefault(k, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and not rep.failed
    entry["details"] += [str(v) for name, v in item.user_properties if name == "detail" and rep.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        e = _RESULTS[k]
        line = f"criterion {k:>2}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
