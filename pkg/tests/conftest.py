import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.skipped and rep.passed):
        return
    n, title = mark.args
    status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
    if rep.when == "call" or status != "PASS":
        detail = ""
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        _results[n] = (status, title, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, title, secs, detail = _results[n]
        line = f"criterion {n:>2}  {status}  {title}  ({secs:.1f} s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
