import os
from pathlib import Path

import numpy as np
import pytest

from lst2d import mnist_io
from lst2d.nn_core import load_model, save_model, spec_by_name
from lst2d.train import TrainConfig, read_history_csv, train, write_history_csv

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("LST2D_DATA", ROOT / "data" / "mnist"))
RUNS_DIR = Path(os.environ.get("LST2D_RUNS", ROOT / "runs" / "acceptance"))

needs_mnist = pytest.mark.skipif(not mnist_io.has_mnist(DATA_DIR), reason=f"MNIST not found in {DATA_DIR}")


@pytest.fixture(scope="session")
def data_dir():
    if not mnist_io.has_mnist(DATA_DIR):
        pytest.skip(f"MNIST not found in {DATA_DIR}")
    return DATA_DIR


@pytest.fixture(scope="session")
def mnist(data_dir):
    return mnist_io.load_mnist(data_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def trained_model(name, mnist, epochs=300, seed=1):
    """Train once with the default protocol and cache the result under ``runs/acceptance``.

    Delete the cache directory to force retraining.
    """
    spec = spec_by_name(name)
    stem = RUNS_DIR / f"{name}-e{epochs}-s{seed}"
    model_path, hist_path = stem.with_suffix(".lst"), stem.with_suffix(".csv")
    if model_path.exists() and hist_path.exists():
        spec, params = load_model(model_path)
        return spec, params, read_history_csv(hist_path)
    RUNS_DIR.mkdir(parents=True, exist_ok=True)
    ds_train, ds_test = mnist
    result = train(spec, ds_train, ds_test, TrainConfig(epochs=epochs, seed=seed))
    save_model(spec, result.params, model_path)
    write_history_csv(result.history, hist_path)
    return spec, result.params, result.history


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def record(label, ok, detail):
        _ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        print(_ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
