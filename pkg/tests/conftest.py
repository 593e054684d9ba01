from pathlib import Path

import numpy as np
import pytest

from shapeformer.data_io import Dataset, parse_ts_file

DATA_DIR = Path(__file__).parent / "data"
BM_TRAIN = DATA_DIR / "BasicMotions" / "BasicMotions_TRAIN.ts"
BM_TEST = DATA_DIR / "BasicMotions" / "BasicMotions_TEST.ts"


@pytest.fixture(scope="session")
def basic_motions():
    return parse_ts_file(BM_TRAIN), parse_ts_file(BM_TEST)


def make_dataset(X, y, classes=None, split="train", name="toy"):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if classes is None:
        classes = tuple(str(c) for c in range(int(y.max()) + 1))
    ids = tuple(f"i{k}" for k in range(len(y)))
    return Dataset(X, y, tuple(classes), ids, name=name, split=split)


def motif_dataset(n_per_class=6, T=30, V=1, seed=0, motif=(0.0, 5.0, 0.0), noise=0.0, drift=0):
    """Class "a" carries ``motif`` at a (possibly drifting) position, class "b" is flat."""
    rng = np.random.default_rng(seed)
    X = np.zeros((2 * n_per_class, V, T))
    if noise:
        X += rng.normal(0, noise, X.shape)
    y = np.array([0] * n_per_class + [1] * n_per_class)
    L = len(motif)
    for i in range(n_per_class):
        pos = T // 2 - L // 2
        if drift:
            pos += int(rng.integers(-drift, drift + 1))
        X[i, 0, pos:pos + L] += motif
    return make_dataset(X, y, ("a", "b"))


def tiny_pool(V=2, T=16, seed=0, g_per_class=1):
    """Small two-class pool discovered on random data with a planted bump."""
    from shapeformer.discovery import discover

    rng = np.random.default_rng(seed)
    X = rng.normal(size=(8, V, T))
    X[:4, 0, 5:9] += 3.0
    ds = make_dataset(X, [0] * 4 + [1] * 4, ("a", "b"))
    return discover(ds, per_class=g_per_class, npip=5), ds


# per-criterion verdict lines collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def record_criterion(status: str, name: str, detail: str) -> None:
    line = f"[{status}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
