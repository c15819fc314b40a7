from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "baseline functionality",
    2: "transport transparency",
    3: "fault-model statistics",
    4: "projection oracle",
    5: "gradient check",
    6: "dual nonnegativity and stationarity",
    7: "limit-search correctness",
    8: "degenerate-severity sanity",
    9: "qualitative delay trend",
    10: "determinism",
}

_outcomes: dict[int, list[bool]] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or rep.failed:
        _outcomes.setdefault(n, []).append(rep.passed)


@pytest.fixture
def acceptance_note(request):
    mark = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        _notes.setdefault(mark.args[0], []).append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            continue
        ok = all(_outcomes[n])
        tr.write_line(f"criterion {n:>2} {name:<38} {'PASS' if ok else 'FAIL'}")
        for line in _notes.get(n, []):
            tr.write_line(f"    {line}")
