import numpy as np
import pytest

from affuse.rng import RngStream
from affuse.tensor import Parameter, Tensor, mul

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return RngStream(12345)


def rand_param(rng: RngStream, shape, scale: float = 1.0, name: str = "x") -> Parameter:
    return Parameter(rng.normal_array(shape, std=scale), name=name)


def projected(out: Tensor, rng: RngStream) -> Tensor:
    """Scalar sum(R * out) with fixed random R, for gradient checks of non-scalar ops."""
    r = Tensor(rng.normal_array(out.shape))
    return mul(out, r).sum()
