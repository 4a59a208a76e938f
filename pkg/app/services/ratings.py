import io
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.exceptions import RatingsParseError
from app.models.containers import Dataset, PairSet
from app.models.schemas import PairUniverse

COLUMNS = ["user_id", "item_id", "rating"]
_LINE_IN_ERROR = re.compile(r"line (\d+)")


def _read_records(path: Path) -> Tuple[List[str], List[int]]:
    """Strip comment and blank lines, remembering original line numbers."""
    records, line_numbers = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.rstrip("\r\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            n_fields = stripped.count("\t") + 1
            if n_fields != len(COLUMNS):
                raise RatingsParseError(
                    f"expected {len(COLUMNS)} tab-separated fields, found {n_fields}",
                    line_number=line_number,
                    path=str(path),
                )
            records.append(stripped)
            line_numbers.append(line_number)
    return records, line_numbers


def read_ratings_frame(path: Union[str, Path]) -> pd.DataFrame:
    """Parse a ratings TSV into a frame with a `line` column."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Ratings file not found: {path}")

    records, line_numbers = _read_records(path)
    if not records:
        raise RatingsParseError("empty ratings file", path=str(path))

    try:
        frame = pd.read_csv(
            io.StringIO("\n".join(records)),
            sep="\t",
            header=None,
            names=COLUMNS,
            dtype=str,
            keep_default_na=False,
            quoting=3,
            engine="c",
        )
    except pd.errors.ParserError as e:
        match = _LINE_IN_ERROR.search(str(e))
        line_number = line_numbers[int(match.group(1)) - 1] if match else None
        raise RatingsParseError(f"malformed record ({e})", line_number=line_number, path=str(path)) from e

    if len(frame) != len(records):
        raise RatingsParseError("record count mismatch while parsing", path=str(path))
    frame["line"] = line_numbers

    missing = frame[COLUMNS].isna().any(axis=1) | (frame[COLUMNS] == "").any(axis=1)
    if missing.any():
        line_number = int(frame.loc[missing, "line"].iloc[0])
        raise RatingsParseError("expected user_id<TAB>item_id<TAB>rating", line_number=line_number, path=str(path))

    frame["rating"] = pd.to_numeric(frame["rating"], errors="coerce")
    bad = ~np.isfinite(frame["rating"].to_numpy(dtype=np.float64))
    if bad.any():
        line_number = int(frame.loc[bad, "line"].iloc[0])
        raise RatingsParseError("rating is not a finite number", line_number=line_number, path=str(path))

    duplicated = frame.duplicated(subset=["user_id", "item_id"], keep="first")
    if duplicated.any():
        line_number = int(frame.loc[duplicated, "line"].iloc[0])
        raise RatingsParseError("duplicate (user, item) pair", line_number=line_number, path=str(path))

    return frame


def load_ratings(path: Union[str, Path], positive_threshold: float = 4.0,
                 pair_universe: PairUniverse = PairUniverse.GRID) -> Dataset:
    """Load a ratings TSV, binarise at the threshold and re-index ids densely."""
    frame = read_ratings_frame(path)

    user_codes, user_ids = pd.factorize(frame["user_id"], sort=False)
    item_codes, item_ids = pd.factorize(frame["item_id"], sort=False)
    ratings = frame["rating"].to_numpy(dtype=np.float64)
    feedback = (ratings >= positive_threshold).astype(np.int8)

    ds = Dataset(
        n_users=len(user_ids),
        n_items=len(item_ids),
        users=user_codes,
        items=item_codes,
        feedback=feedback,
        pair_universe=pair_universe,
        ratings=ratings,
        user_ids=tuple(str(u) for u in user_ids),
        item_ids=tuple(str(i) for i in item_ids),
    )
    logger.info(
        f"Loaded {len(ds)} ratings from {Path(path).name}: {ds.n_users} users, "
        f"{ds.n_items} items, {ds.n_positive} positive at threshold {positive_threshold}"
    )
    return ds


def load_test_ratings(path: Union[str, Path], ds: Dataset, positive_threshold: float = 4.0) -> PairSet:
    """Load a held-out ratings TSV through the id maps of an existing dataset."""
    frame = read_ratings_frame(path)
    users = index_lookup(ds.user_ids)
    items = index_lookup(ds.item_ids)

    known = frame["user_id"].isin(users.keys()) & frame["item_id"].isin(items.keys())
    dropped = int((~known).sum())
    if dropped:
        logger.warning(f"Dropped {dropped} test ratings with ids unseen in training data")
    frame = frame[known]

    pairs = PairSet(
        users=frame["user_id"].map(users).to_numpy(dtype=np.int64),
        items=frame["item_id"].map(items).to_numpy(dtype=np.int64),
        labels=(frame["rating"].to_numpy(dtype=np.float64) >= positive_threshold).astype(np.int8),
    )
    logger.info(f"Loaded {len(pairs)} test ratings from {Path(path).name}")
    return pairs


def index_lookup(ids: Sequence[str]) -> Dict[str, int]:
    return {raw: index for index, raw in enumerate(ids)}


def write_ratings(ds: Dataset, path: Union[str, Path]) -> Path:
    """Write a dataset as a ratings TSV; binarised datasets write feedback as the rating."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    user_ids = np.asarray(ds.user_ids, dtype=object) if ds.user_ids else None
    item_ids = np.asarray(ds.item_ids, dtype=object) if ds.item_ids else None
    frame = pd.DataFrame({
        "user_id": ds.users if user_ids is None else user_ids[ds.users],
        "item_id": ds.items if item_ids is None else item_ids[ds.items],
        "rating": ds.feedback.astype(np.int64) if ds.ratings is None else ds.ratings,
    })
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.9g", lineterminator="\n")
    logger.info(f"Wrote {len(frame)} ratings to {path}")
    return path


def dataset_from_matrix(feedback: np.ndarray, pair_universe: PairUniverse = PairUniverse.GRID,
                        mask: Optional[np.ndarray] = None) -> Dataset:
    """Dataset holding every cell of a dense feedback matrix (or the cells under `mask`)."""
    n_users, n_items = feedback.shape
    if mask is None:
        mask = np.ones_like(feedback, dtype=bool)
    users, items = np.nonzero(mask)
    return Dataset(
        n_users=n_users,
        n_items=n_items,
        users=users,
        items=items,
        feedback=feedback[users, items],
        pair_universe=pair_universe,
        user_ids=tuple(str(u) for u in range(n_users)),
        item_ids=tuple(str(i) for i in range(n_items)),
    )
