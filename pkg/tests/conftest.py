import numpy as np
import pytest

from reluverify.interval import InputBox
from reluverify.network import Dense, Network, Relu


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def dense_net(*layers):
    """``dense_net((W, b), (W, b), ...)`` with ReLUs between consecutive layers."""
    out = []
    for k, (w, b) in enumerate(layers):
        w = np.atleast_2d(np.asarray(w, dtype=float))
        out.append(Dense(w, np.asarray(b, dtype=float).reshape(-1)))
        if k < len(layers) - 1:
            out.append(Relu())
    return Network(out[0].weights.shape[1], out)


def unit_box(d):
    return InputBox(np.zeros(d), np.ones(d))


# acceptance criteria report their outcome here; printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
