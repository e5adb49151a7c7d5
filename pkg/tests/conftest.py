import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfvv.problem import InitialMeasure, lq_spec  # noqa: E402


def zero_spec(epsilon_free=True, initial=None, lambda_=1.0, dim=1):
    """b = 0, f = g = 0, psi = lambda |a|^2."""
    return lq_spec(dim=dim, A=0.0, B=0.0, Q=0.0, QT=0.0, lambda_=lambda_,
                   initial_measure=initial or InitialMeasure.uniform(-1.0, 1.0, dim), name="zero")


def scalar_spec(**callbacks):
    """One-dimensional zero problem with selected callbacks replaced."""
    return zero_spec(initial=callbacks.pop("initial", None)).replace(**callbacks)


def zero_control(t, x):
    return np.zeros_like(x)


@pytest.fixture
def zero():
    return zero_spec()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
