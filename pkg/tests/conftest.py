import pytest

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA.setdefault(mark.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rows = _CRITERIA[n]
        ok = all(p for _, p, _ in rows)
        details = "; ".join(d for _, _, d in rows if d)
        failed = [name for name, p, _ in rows if not p]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({len(rows)} check(s))"
        if details:
            line += f"  {details}"
        if failed:
            line += f"  failing: {', '.join(failed)}"
        terminalreporter.write_line(line)
