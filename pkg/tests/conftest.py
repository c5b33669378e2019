import sys

import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def random_scan_case(rng, length, D=None, N=None, B=1):
    D = D or int(rng.integers(1, 5))
    N = N or int(rng.integers(1, 17))
    x = rng.normal(size=(B, length, D))
    a = rng.uniform(0.0, 1.0, size=(B, length, D, N))
    b = rng.normal(size=(B, length, D, N))
    c = rng.normal(size=(B, length, N))
    return x, a, b, c


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acc.RESULTS:
        terminalreporter.write_line(line)
