import numpy as np
import pytest

from deepcut import nn


def tiny_net(seed=0, patch=(2, 6, 5), filters=(3, 2), kernels=(3, 3), dense=4, std=0.5,
             bias_std=0.0):
    """Small float64 network for finite-difference checks."""
    topo = nn.Topology(patch, filters, kernels, dense)
    params = nn.build_network(topo, seed=seed, conv_std=std, dense_std=std, dtype=np.float64)
    if bias_std:
        # nonzero biases keep ReLUs off their kink when a whole input row is dropped
        rng = np.random.default_rng(seed + 1)
        for b in params.biases:
            b[:] = rng.normal(0.0, bias_std, b.shape)
    return params


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    CRITERIA[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
