from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

FIXTURES = Path(__file__).parent / "fixtures"


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures():
    return FIXTURES


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
