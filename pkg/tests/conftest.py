from pathlib import Path

import numpy as np
import pytest

from dpfair.tabular import Dataset, Schema

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def grouped_dataset(counts, extra_cards=(3,), seed=0):
    """Dataset whose (a, y) groups have the given counts {(a, y): n}; extra
    feature columns are filled at random."""
    rng = np.random.default_rng(seed)
    rows = []
    for (a, y), n in counts.items():
        for _ in range(n):
            rows.append([a, y] + [int(rng.integers(c)) for c in extra_cards])
    schema = Schema.simple((2, 2) + tuple(extra_cards), protected=0, label=1)
    return Dataset(schema, np.asarray(rows, dtype=np.int64).reshape(-1, 2 + len(extra_cards)))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
