import os
from pathlib import Path

import numpy as np
import pytest

from fedapm.dataset import build_shards, synthetic_movielens
from fedapm.recommender import init_params, item_feature_table
from fedapm.rng import substream

ROOT = Path(__file__).resolve().parents[1]


def ml100k_dir() -> Path | None:
    """Directory holding ml-100k/u.data, if one can be found."""
    for base in (os.environ.get("FEDAPM_DATA_DIR"), ROOT / "data", Path("/root/data")):
        if base and (Path(base) / "ml-100k" / "u.data").exists():
            return Path(base)
    return None


requires_ml100k = pytest.mark.skipif(ml100k_dir() is None, reason="ML-100K not found; run scripts/fetch_ml100k.py")


@pytest.fixture(scope="session")
def data_dir():
    d = ml100k_dir()
    if d is None:
        pytest.skip("ML-100K not found")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_world():
    """20 synthetic users over 30 items, d=8."""
    inter, profiles = synthetic_movielens(20, 30, seed=3)
    shards = build_shards(inter, profiles, 30, q=2, seed=3)
    X = item_feature_table(30, 8, substream(3, "items"))
    theta = init_params(8, 8, substream(3, "init"), std=0.1)
    return shards, X, theta


CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
