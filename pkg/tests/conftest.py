from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from app import create_app
from app.config import Settings
from app.models.containers import Dataset
from app.models.schemas import PairUniverse

REPO_ROOT = Path(__file__).resolve().parents[1]
TOY_RATINGS = REPO_ROOT / "data" / "toy_ratings.tsv"


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield
    logger.remove()


@pytest.fixture
def toy_ratings_path() -> Path:
    return TOY_RATINGS


@pytest.fixture
def write_tsv(tmp_path):
    """Write raw lines to a TSV file under tmp_path."""
    def _write(lines, name="ratings.tsv"):
        path = tmp_path / name
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path
    return _write


def random_ratings_dataset(n_users: int, n_items: int, density: float, seed: int,
                           skew: float = 1.0) -> Dataset:
    """Explicit 1-5 ratings with popularity skew over items."""
    rng = np.random.default_rng(seed)
    item_weight = (np.arange(n_items, 0, -1) / n_items) ** skew
    rated = rng.random((n_users, n_items)) < np.clip(density * 2 * item_weight, 0.0, 1.0)
    users, items = np.nonzero(rated)
    ratings = rng.integers(1, 6, size=len(users)).astype(np.float64)
    return Dataset(
        n_users=n_users,
        n_items=n_items,
        users=users,
        items=items,
        feedback=(ratings >= 4).astype(np.int8),
        pair_universe=PairUniverse.OBSERVED,
        ratings=ratings,
        user_ids=tuple(str(u) for u in range(n_users)),
        item_ids=tuple(str(i) for i in range(n_items)),
    )


@pytest.fixture
def base_ratings() -> Dataset:
    return random_ratings_dataset(60, 40, density=0.3, seed=7)


@pytest.fixture
def app():
    app = create_app(Settings(LOG_LEVEL="WARNING"))
    app.config.update(TESTING=True)
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture(scope="session")
def make_ratings():
    return random_ratings_dataset
