import numpy as np
import pytest

from srda.model import ClassifierSpec, GeneratorSpec, Model

_CRITERIA = {}


@pytest.fixture
def report_criterion():
    """Record one acceptance line: ``report(number, title, passed, detail)``."""

    def report(number, title, passed, detail=""):
        status = "PASS" if passed is True else "FAIL" if passed is False else passed
        line = f"[{status}] criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        _CRITERIA[number] = line
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])


@pytest.fixture
def small_model():
    return Model.build(GeneratorSpec([2, 6, 4]), ClassifierSpec([4, 5, 3]), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
