import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tetcnn import dataset  # noqa: E402
from tetcnn.tetmesh import random_mesh  # noqa: E402

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_shell():
    return dataset.generate_shell(dataset.ShellSpec(subdivision=2, jitter=0.01, seed=4), "small")


@pytest.fixture(scope="session")
def random_meshes():
    g = np.random.default_rng(2024)
    return [random_mesh(int(g.integers(12, 24)), g, max_tets=60) for _ in range(20)]
