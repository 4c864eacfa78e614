import numpy as np
import pytest

from collabinfer.nn import TrainConfig, build_model, load_digits_dataset, train, train_test_split
from collabinfer.partition import PartitionConfig, dirichlet_partition
from collabinfer.sharing import Dealer
from collabinfer.transport import Transport


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def session3():
    """A fresh 3-party transport and dealer."""
    return Transport(3), Dealer(3, seed=7)


@pytest.fixture(scope="session")
def digits_split():
    return train_test_split(load_digits_dataset(), 0.25, 0)


@pytest.fixture(scope="session")
def tiny_models(digits_split):
    """Three small digit classifiers trained on IID client splits."""
    train_set, test_set = digits_split
    parts = dirichlet_partition(train_set, PartitionConfig(1000.0, 3, seed=0))
    models = [train(build_model("custom", [64, 32, 10], seed=k), part, TrainConfig(epochs=20, seed=k))
              for k, part in enumerate(parts)]
    return models, test_set


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, ok, detail)."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
