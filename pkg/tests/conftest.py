import numpy as np
import pytest

from rfpm.tensor import Conv2dParams, Node, constant, parameter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_params(w, b, stride=1, padding=None, trainable=False):
    make = parameter if trainable else constant
    w = np.asarray(w, dtype=np.float64)
    pad = w.shape[2] // 2 if padding is None else padding
    return Conv2dParams(make(w), make(np.asarray(b, dtype=np.float64)), stride, pad)


def distinct_values(rng, shape):
    """Values in (-1, 1), pairwise at least 2/n apart and at least 1/n from zero.

    Keeps max-pool windows tie-free and leaky-relu inputs off the kink for
    tensors up to ~1000 entries (gap > 1e-3).
    """
    n = int(np.prod(shape))
    return ((rng.permutation(n) + 0.5) / n * 2.0 - 1.0).reshape(shape)


@pytest.fixture
def node():
    def make(value, trainable=True):
        return Node(np.asarray(value, dtype=np.float64), requires_grad=trainable)

    return make


# -- acceptance report ----------------------------------------------------------------

_REPORT = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_REPORT] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, passed, detail)``."""
    report = request.config.stash[_REPORT]

    def record(number: int, passed: bool, detail: str) -> bool:
        report[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    report = config.stash.get(_REPORT, {})
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        passed, detail = report[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
