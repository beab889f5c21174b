import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("pcnet", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pcnet")

DATA_ROOT = Path(os.environ.get("PCN_DATA_DIR", Path.home() / "data"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist():
    from pcnet.data import load_mnist

    path = DATA_ROOT / "mnist"
    if not (path / "train-images-idx3-ubyte").exists() and not (path / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST not found under {path}")
    return load_mnist(path)


@pytest.fixture(scope="session")
def cifar10():
    from pcnet.data import load_cifar10

    path = DATA_ROOT / "cifar-10-batches-bin"
    if not (path / "data_batch_1.bin").exists():
        pytest.skip(f"CIFAR-10 not found under {path}")
    return load_cifar10(path)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
