import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from dynflow import kernels, tensor  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _double_precision():
    tensor.set_default_dtype("float64")
    yield
    tensor.set_default_dtype("float64")


@pytest.fixture(params=["python", "cython"])
def backend(request):
    """Run a test once per kernel backend; skips the compiled one if it is not built."""
    before = kernels.BACKEND
    try:
        kernels.use(request.param if request.param == "python" else "cython")
    except ImportError:
        pytest.skip("compiled kernels not built")
    yield request.param
    kernels.use(before)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
