import numpy as np
import pytest

from mvssm.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    # one line per acceptance criterion, collected from the call (or failed setup) phase
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        name = report.nodeid.split("::")[-1][len("test_criterion_"):]
        _criteria[name] = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):>2} {label:<28} {_criteria[name]}")
