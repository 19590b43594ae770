import time

import pytest

_CRITERIA: dict = {}


class _Criterion:
    def __init__(self, number: int, budget_s: float):
        self.number = number
        self.budget_s = budget_s
        self.detail = ""
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def criterion(request):
    """Times an acceptance criterion and records a one-line verdict for the summary.

    The test sets ``crit.detail``; the runtime budget is checked afterwards.
    """
    marker = request.node.get_closest_marker("criterion")
    number, budget = marker.args
    crit = _Criterion(number, budget)
    yield crit
    t = crit.elapsed()
    rep = getattr(request.node, "rep_call", None)
    failed = rep is None or not rep.passed
    over = t > budget
    note = crit.detail + (f"; over budget {budget:g}s" if over else "")
    _CRITERIA[number] = f"criterion {number:>2}: {'FAIL' if failed or over else 'PASS'}  ({t:.1f}s) {note}"
    print("\n" + _CRITERIA[number])
    assert not over, f"criterion {number} took {t:.1f}s, budget {budget:g}s"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, budget_s): acceptance criterion with runtime budget")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
