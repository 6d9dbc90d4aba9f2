import os
from pathlib import Path

import numpy as np
import pytest

from wnbias.netcore import NetworkSpec

REPO = Path(__file__).resolve().parents[1]
DATA_DIR = REPO / "data"
MNIST_IMAGES = DATA_DIR / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA_DIR / "mnist5k-labels-idx1-ubyte.gz"

os.environ.setdefault("WNBIAS_MNIST_DIR", str(DATA_DIR))

ACTS = ("linear", "relu", "relu_squared")


def random_spec(rng: np.random.Generator, acts=ACTS, max_depth: int = 3, out_dim=None) -> NetworkSpec:
    depth = int(rng.integers(1, max_depth + 1))
    dims = [int(rng.integers(1, 5)) for _ in range(depth)]
    dims.append(int(out_dim if out_dim is not None else rng.integers(1, 4)))
    hidden = tuple(str(rng.choice(acts)) for _ in range(depth - 1))
    return NetworkSpec(tuple(dims), hidden)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_record(log_total, d=None, norms=None, log_grad_norms=None, params=None,
                steps=None, margin=None, log_a5=None, meta=None):
    """Synthetic record; unspecified columns are filled with plain placeholders."""
    from wnbias.records import TrajectoryRecord

    log_total = np.asarray(log_total, dtype=float)
    n = log_total.size
    steps = np.arange(n) if steps is None else np.asarray(steps)
    norms = np.ones((n, 2)) if norms is None else np.asarray(norms, dtype=float)
    U = norms.shape[1]
    zeros = np.zeros((n, U))
    return TrajectoryRecord(
        steps.astype(np.int64),
        np.arange(n, dtype=float) if d is None else np.asarray(d, dtype=float),
        log_total, np.zeros(n), np.full(n, 0.01),
        np.ones(n) if margin is None else np.asarray(margin, dtype=float),
        norms, zeros if log_grad_norms is None else np.asarray(log_grad_norms, dtype=float),
        zeros, zeros if log_a5 is None else np.asarray(log_a5, dtype=float),
        params, None, dict(meta or {}),
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
