from __future__ import annotations

import pytest

from ctxreuse.core import Context
from ctxreuse.index import ContextIndex

# contexts of the running example, in retrieval order
EXAMPLE = {
    "C1": (2, 1, 3),
    "C2": (2, 6, 1),
    "C3": (4, 1, 0),
    "C6": (2, 1, 4),
    "C7": (5, 7, 8),
    "C8": (1, 2, 9),
}


def ctx(name_or_docs, tokens=1024, session_id=None, turn=0) -> Context:
    if isinstance(name_or_docs, str):
        return Context.of(EXAMPLE[name_or_docs], tokens, session_id if session_id is not None else name_or_docs, turn)
    return Context.of(name_or_docs, tokens, session_id or "", turn)


@pytest.fixture
def example_index() -> ContextIndex:
    return ContextIndex.build([ctx("C1"), ctx("C2"), ctx("C3")])


# -- acceptance reporting ----------------------------------------------------

_criteria: dict[str, tuple[int, str]] = {}
_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.when == "call" or report.failed or report.skipped:
        prev = _outcomes.get(report.nodeid)
        if prev != "FAIL":
            _outcomes[report.nodeid] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    by_number: dict[int, list[str]] = {}
    titles: dict[int, str] = {}
    for nodeid, (num, title) in _criteria.items():
        if nodeid in _outcomes:
            by_number.setdefault(num, []).append(_outcomes[nodeid])
            titles[num] = title
    terminalreporter.section("acceptance criteria")
    for num in sorted(by_number):
        results = by_number[num]
        verdict = "PASS" if all(r == "PASS" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {verdict}  {titles[num]} ({len(results)} checks)")
