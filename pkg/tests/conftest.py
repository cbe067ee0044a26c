import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\w+?)_")
_outcomes: dict[str, str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    key = m.group(1)
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        prev = _outcomes.get(key)
        if report.skipped:
            state = "SKIP"
        elif report.passed:
            state = "PASS"
        else:
            state = "FAIL"
        if prev != "FAIL":
            _outcomes[key] = state


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes, key=lambda k: (len(k), k)):
        terminalreporter.write_line(f"criterion {key}: {_outcomes[key]}")
