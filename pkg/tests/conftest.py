import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

MNIST_CANDIDATES = [os.environ.get("LIPENS_MNIST_DIR", ""), "/root/data/mnist", str(Path.home() / "data" / "mnist")]


@pytest.fixture(scope="session")
def mnist_dir():
    from lipens.data import has_mnist

    for cand in MNIST_CANDIDATES:
        if cand and has_mnist(cand):
            return Path(cand)
    pytest.skip("MNIST IDX files not found; set LIPENS_MNIST_DIR or run `lipens fetch-mnist`")


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_log import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
