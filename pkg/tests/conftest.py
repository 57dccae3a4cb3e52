import numpy as np
import pytest

from unlearnlab.model import ModelConfig, init_params


def tiny_config(**kw):
    base = dict(vocab_size=23, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=12, seed=7)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_params():
    return init_params(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance bookkeeping: one PASS/FAIL line per criterion -------------

_CRITERIA: dict[int, dict] = {}
_NOTES: list[str] = []


def note(text: str) -> None:
    """Queue a line for the acceptance summary at the end of the run."""
    _NOTES.extend(text.strip("\n").splitlines())


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "tests": 0})
    entry["tests"] += 1
    entry["ok"] &= call.excinfo is None


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}")
    if _NOTES:
        terminalreporter.write_line("")
        for line in _NOTES:
            terminalreporter.write_line(line)
