import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from exemplar_diffusion.schedule import build_schedule  # noqa: E402
from exemplar_diffusion.synthworld import make_dataset  # noqa: E402


@pytest.fixture(scope="session")
def cosine():
    return build_schedule("cosine", 1000)


@pytest.fixture(scope="session")
def small_arc():
    return make_dataset("grid_arc", 12, 4, seed=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
