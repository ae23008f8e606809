import pytest

from helpers import TINY_RAWS
from mcrnet import tensor as T
from mcrnet.data import collate, process_examples
from mcrnet.encoder import Vocab


@pytest.fixture
def tiny_vocab():
    return Vocab.build([r.question for r in TINY_RAWS] + [r.passage for r in TINY_RAWS])


@pytest.fixture
def tiny_batch(tiny_vocab):
    return collate(process_examples(TINY_RAWS, tiny_vocab, 12), 12)


@pytest.fixture
def rng():
    return T.make_rng(1234)


# acceptance criteria: one PASS/FAIL line each, printed after the run
_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _CRITERIA.get(number, (title, "PASS"))[1]
        _CRITERIA[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{title}]: {status}")
