import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from hashshard.dataset import DatasetHandle, DatasetHeader  # noqa: E402
from hashshard.sparse import PackedRows  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(n, dim, classes, nnz, seed=0, labels_per=1):
    """Uniform random sparse points with random labels."""
    rng = np.random.default_rng(seed)
    idx = np.sort(np.stack([rng.choice(dim, nnz, replace=False) for _ in range(n)]), axis=1)
    vals = rng.uniform(0.1, 1.0, size=(n, nnz))
    feats = PackedRows(np.arange(n + 1, dtype=np.int64) * nnz, idx.reshape(-1).astype(np.int32),
                       vals.reshape(-1).astype(np.float32), dim)
    labs = np.stack([rng.choice(classes, labels_per, replace=False) for _ in range(n)])
    return DatasetHandle(DatasetHeader(n, dim, classes), feats,
                         np.arange(n + 1, dtype=np.int64) * labels_per, labs.reshape(-1))


@pytest.fixture
def small_data():
    return random_dataset(96, 40, 30, 6, seed=3)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and assert one acceptance criterion: ``verdict(n, ok, detail)``."""
    def check(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_VERDICTS].append(line)
        print(line)
        assert ok, line
    return check
