import numpy as np
import pytest

from promptfcl.encoder import EncoderConfig, build_encoder


@pytest.fixture(scope="session")
def small_encoder():
    cfg = EncoderConfig(num_layers=3, embed_dim=16, num_heads=2, num_tokens=4, input_dim=8,
                        prompted_layers=(0, 1))
    return build_encoder(cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance bookkeeping: tests marked ``criterion(n, title)`` roll up into one line per criterion

_marks: dict = {}
_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _marks[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _marks:
        return
    if report.when != "call" and report.outcome == "passed":
        return
    number, title = _marks[report.nodeid]
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "tests": 0})
    if report.when == "call":
        entry["tests"] += 1
    entry["passed"] &= report.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {e['title']} ({e['tests']} test(s))")
