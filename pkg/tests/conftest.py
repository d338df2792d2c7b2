import numpy as np
import pytest

from tspr.config import RunConfig
from tspr.marketplace import Group, ScoredCandidate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg(tmp_path):
    """A desk-top sized configuration: seconds per experiment."""
    return RunConfig(
        n_items=20_000, n_queries=2_000, tune_queries=4_000, n_boot=20, runs=4,
        curve_runs=2, r_min=0.0, delta=0.25, out_dir=str(tmp_path / "out"),
    )


def make_candidates(relevance, groups=None, ids=None):
    n = len(relevance)
    ids = range(1, n + 1) if ids is None else ids
    groups = [Group.PLACEBO] * n if groups is None else groups
    return [ScoredCandidate(int(i), float(r), Group(g)) for i, r, g in zip(ids, relevance, groups)]


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
