import numpy as np
import pytest
from hypothesis import settings

from fedbps.data import synthesize
from fedbps.nn import Conv2d, Dense, Flatten, MaxPool2d, NetworkSpec, ReLU, mlp

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_cnn() -> NetworkSpec:
    return NetworkSpec((2, 8, 8), (
        Conv2d(2, 3, 3), ReLU(), MaxPool2d(2),
        Conv2d(3, 4, 2, stride=2), ReLU(),
        Flatten(), Dense(4, 5), ReLU(), Dense(5, 3),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return mlp([5, 7, 4])


@pytest.fixture
def cnn_spec():
    return small_cnn()


@pytest.fixture(scope="session")
def blobs():
    """Four-class synthetic set large enough for a few small clients."""
    return synthesize(classes=4, per_class=150, dims=6, class_separation=3.0, seed=3)
