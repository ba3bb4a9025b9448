from __future__ import annotations

import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
_CANDIDATES = [os.environ.get("ADMMPRUNE_MNIST"), ROOT / "data" / "mnist", Path("/root/data/mnist")]


def find_mnist():
    for c in filter(None, _CANDIDATES):
        root = Path(c)
        if any((root / f"train-images-idx3-ubyte{ext}").exists() for ext in ("", ".gz")):
            return root
    return None


@pytest.fixture(scope="session")
def mnist_path():
    path = find_mnist()
    if path is None:
        pytest.skip("MNIST IDX files not found; set ADMMPRUNE_MNIST")
    return path


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
