"""Shared fixtures and the acceptance-criteria summary.

Tests in ``test_acceptance.py`` carry ``@pytest.mark.acceptance(n, "title")``.
After the run one line per criterion is printed: PASS when every test of that
criterion passed, FAIL when any failed, SKIP when all were skipped.
"""

from __future__ import annotations

import numpy as np
import pytest

from c2w2c import corpus as C

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "outcomes": []})
    if call.when == "call":
        entry["outcomes"].append("skip" if call.excinfo and call.excinfo.errisinstance(pytest.skip.Exception) else ("fail" if call.excinfo else "pass"))
    elif call.excinfo is not None:
        entry["outcomes"].append("skip" if call.excinfo.errisinstance(pytest.skip.Exception) else "fail")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        outs = entry["outcomes"]
        if "fail" in outs:
            verdict = "FAIL"
        elif outs and all(o == "skip" for o in outs):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {entry['title']}")


TOY_LINES = ["kissa syö kalaa", "koira juo vettä", "lapsi näkee kissan", "isä ostaa leipää .", "auto on uusi"]


@pytest.fixture
def toy_sentences():
    return [[C.SENT_START, *line.split(), C.SENT_END] for line in TOY_LINES]


@pytest.fixture
def toy_vocab(toy_sentences):
    return C.build_char_vocab(toy_sentences)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
