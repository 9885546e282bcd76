import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from promptdet.synthdata import CategorySet  # noqa: E402
from promptdet.vlm import init_encoders  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def three_classes():
    """Two base categories and one novel one."""
    return CategorySet(["red-circle", "green-square", "blue-cross"], [True, True, False])


@pytest.fixture
def tiny_encoders():
    """A narrow float64 VLM for exact and finite-difference checks."""
    torch.manual_seed(0)
    params = init_encoders(dim=4, channels=(3, 3), kernel=3, token_dim=4, seed=3)
    return params.to(torch.float64)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
