import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []
REFERENCE_SECONDS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_dataset():
    from unitok.data import gen_synthetic

    return gen_synthetic(4, 500, 128, seed=42)


@pytest.fixture(scope="session")
def reference_runs(reference_dataset):
    """Comparison report plus trained runs on the reference benchmark at default settings."""
    from unitok.metrics import theorem_report
    from unitok.model import TrainConfig

    start = time.perf_counter()
    result = theorem_report(reference_dataset, TrainConfig(), sweep=(0.0, 0.3), return_runs=True)
    REFERENCE_SECONDS["all_runs"] = time.perf_counter() - start
    return result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
