import numpy as np
import pytest

from gtdl.model import ParamVector
from gtdl.simulation import simulate_dataset

GTDL_TRUTH = ParamVector([0.5], [-1.0, 0.5])
FRAILTY_TRUTH = ParamVector([0.5], [-1.0, 0.5], 0.5)


def simulate(params, n, censoring, seed):
    data, _ = simulate_dataset(params, n, censoring, np.random.default_rng(seed))
    return data


@pytest.fixture(scope="session")
def gtdl_data():
    return simulate(GTDL_TRUTH, 200, 0.3, 11)


@pytest.fixture(scope="session")
def frailty_data():
    return simulate(FRAILTY_TRUTH, 400, 0.3, 12)


_VERDICTS: dict[int, str] = {}


def record_verdict(number, title, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}: {detail}"
    _VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
