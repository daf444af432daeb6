import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from distilled_replay.data import DATA_DIR_ENV, find_idx_pair, write_mnist_subset

ACCEPTANCE_LINES: list[str] = []


def _has_idx(path) -> bool:
    try:
        find_idx_pair(path, "train")
        find_idx_pair(path, "test")
    except FileNotFoundError:
        return False
    return True


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """MNIST IDX directory: ``$DISTILLED_REPLAY_DATA`` if it holds IDX files, else the bundled 5k subset."""
    env = os.environ.get(DATA_DIR_ENV)
    if env and _has_idx(env):
        yield Path(env)
        return
    pytest.importorskip("mlxtend")
    out = write_mnist_subset(tmp_path_factory.mktemp("mnist"))
    old = os.environ.get(DATA_DIR_ENV)
    os.environ[DATA_DIR_ENV] = str(out)
    yield out
    if old is None:
        os.environ.pop(DATA_DIR_ENV, None)
    else:
        os.environ[DATA_DIR_ENV] = old


@pytest.fixture
def report():
    def add(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
