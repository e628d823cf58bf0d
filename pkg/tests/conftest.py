import numpy as np
import pytest
import torch

from rockgpt import tensor as T

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(autouse=True)
def _deterministic():
    T.set_deterministic(True)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")
    config.stash[_VERDICTS] = {}


class _Notes:
    def __init__(self):
        self.lines = []

    def __call__(self, text):
        self.lines.append(text)


@pytest.fixture
def note(request):
    """Collects measured values shown next to the criterion's verdict."""
    n = _Notes()
    request.node._criterion_notes = n
    return n


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark and (rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed")):
        notes = getattr(item, "_criterion_notes", None)
        detail = "; ".join(notes.lines) if notes else ""
        item.config.stash[_VERDICTS][mark.args[0]] = (mark.args[1], rep.passed, detail)
    return rep


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        title, ok, detail = verdicts[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
