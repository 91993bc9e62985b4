import numpy as np
import pytest
import torch

from omnimask.vocab import build_layout

torch.set_num_threads(1)


@pytest.fixture
def toy_layout():
    """Text 32 | vision 16 | speech 8, standard specials."""
    return build_layout(32, 16, 8)


@pytest.fixture
def train_layout():
    return build_layout(64, 16, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, filled in by tests/test_acceptance.py and
# repeated at the end of the run so the verdicts are easy to find.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
