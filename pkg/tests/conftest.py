import numpy as np
import pytest

from geocut.core import Dataset
from geocut.randoracle import RandomOracle

# lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def key(i: int, tag: str = "k") -> str:
    return f"{tag.encode().hex()}{i:08x}"


def oracle(i: int, tag: str = "k") -> RandomOracle:
    return RandomOracle(key(i, tag))


def random_instance(rng, n: int, d: int = 2, p: float = 2.0, grid: int | None = None) -> Dataset:
    if grid is None:
        pts = rng.normal(size=(n, d))
    else:
        cells = rng.choice(grid ** d, size=n, replace=False)
        pts = np.stack([(cells // grid ** j) % grid + 1 for j in range(d)], axis=1).astype(float)
    return Dataset(pts, p=p, delta=grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
