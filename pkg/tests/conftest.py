import numpy as np
import pytest

from kplab import tensor


@pytest.fixture(autouse=True)
def _finite_checks():
    prev = tensor.set_check_finite(True)
    yield
    tensor.set_check_finite(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
