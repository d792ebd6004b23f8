import os
from pathlib import Path

import numpy as np
import pytest

from sdconv import kernels

MNIST_DIR = Path(os.environ.get("SDCONV_DATA_DIR", "/root/data")) / "mnist"

BACKENDS = ["python"] + (["compiled"] if kernels.compiled_backend is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    impl = kernels.python_backend if request.param == "python" else kernels.compiled_backend
    monkeypatch.setattr(kernels, "_impl", impl)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def have_mnist():
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason="MNIST files not found (set SDCONV_DATA_DIR)")


def synthetic_digits(n, seed=0, size=28):
    """Ten learnable classes: each class brightens its own 7x7 patch on a 4x4 grid, plus noise."""
    from sdconv.data import Dataset

    r = np.random.default_rng(seed)
    labels = r.integers(0, 10, n)
    x = r.normal(0, 0.3, (n, 1, size, size)).astype(np.float32)
    for i, c in enumerate(labels):
        y0, x0 = divmod(int(c), 4)
        x[i, 0, y0 * 7:(y0 + 1) * 7, x0 * 7:(x0 + 1) * 7] += 2.0
    return Dataset(x, labels.astype(np.int64), "synthetic")


@pytest.fixture(scope="session")
def tiny_data():
    return synthetic_digits(384, seed=1), synthetic_digits(200, seed=2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
