import numpy as np
import pytest

from fmtgp.encoding import EncodedInputs
from fmtgp.kernels import KernelConfig, ScalarKernel
from fmtgp.model import Dataset, Hyperparameters


def random_instance(rng, S=2, n_f=5, n_u=6, d_f=2, p=3, noise=None, periodic=True):
    """Small random problem with well-conditioned blocks."""
    enc = EncodedInputs(tuple(rng.normal(size=(n_f, p)) for _ in range(d_f)),
                        tuple(np.eye(p) for _ in range(d_f)))
    grid = np.sort(rng.uniform(0.0, 1.5, n_u))
    Y = rng.normal(size=(S, n_f, n_u))
    L = np.tril(rng.normal(scale=0.5, size=(S, S)), -1) + np.diag(rng.uniform(0.5, 1.5, S))
    theta = Hyperparameters.from_natural(L, rng.uniform(0.5, 2.0), rng.uniform(1.0, 3.0, d_f),
                                         rng.uniform(0.1, 0.5), noise)
    kernel = KernelConfig(2.5, ScalarKernel("matern_plus_periodic" if periodic else "matern"))
    return theta, Dataset(enc, grid, Y), kernel


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


def report(number, passed, detail):
    """Record and print one acceptance line."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
