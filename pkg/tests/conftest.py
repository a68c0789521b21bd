import pytest

_acceptance: dict[int, tuple[str, str, float, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title, budget): acceptance criterion with "
                                       "a runtime budget in seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call":
        return
    number, title, budget = mark.args
    _acceptance[number] = (title, "PASS" if rep.passed else "FAIL", rep.duration, budget)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, status, took, budget = _acceptance[n]
        tr.write_line(f"[{status}] {n:2d}. {title}  ({took:.1f}s, budget {budget:.0f}s)")
