import pytest

# criterion number -> (title, outcome, seconds, detail lines)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        details = [f"{k}: {v}" for k, v in rep.user_properties]
        _CRITERIA[number] = (title, status, rep.duration, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, seconds, details = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({seconds:.1f} s)")
        for line in details:
            terminalreporter.write_line(f"    {line}")
