import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.models.containers import Dataset, PairSet, SplitAssignment
from app.models.schemas import PairUniverse, SplitTag
from app.utils.helpers import seed_stream
from app.utils.validators import ensure, validate_fraction

MANIFEST_COLUMNS = ["user", "item", "split_tag", "label"]


def materialize_pairs(ds: Dataset) -> PairSet:
    """The pairs the training loss sums over, with their observed feedback."""
    if ds.pair_universe == PairUniverse.OBSERVED:
        return PairSet(ds.users, ds.items, ds.feedback)

    dense = ds.feedback_matrix()
    users, items = np.divmod(np.arange(ds.n_users * ds.n_items, dtype=np.int64), ds.n_items)
    return PairSet(users, items, dense.reshape(-1))


def _initial_splits(ds: Dataset, splits: Optional[SplitAssignment]) -> SplitAssignment:
    if splits is not None:
        return splits
    return SplitAssignment(n_users=ds.n_users, n_items=ds.n_items, train=materialize_pairs(ds))


def _active_count(n_users: int, active_fraction: float) -> int:
    # tolerance keeps 0.29 * 100 from flooring to 28
    return int(math.floor(active_fraction * n_users + 1e-9))


def build_unbiased_validation(ds: Dataset, active_fraction: float = 0.2,
                              splits: Optional[SplitAssignment] = None) -> SplitAssignment:
    """Move each active user's most popular positive and negative item into the unbiased validation set."""
    ensure(validate_fraction(active_fraction, "active_fraction"))
    splits = _initial_splits(ds, splits)

    n_active = _active_count(ds.n_users, active_fraction)
    if n_active == 0:
        logger.warning(f"active_fraction {active_fraction} covers no users; unbiased validation is empty")
        return splits.replace(unbiased_val=PairSet.empty())

    activity = ds.user_positive_counts()
    order = np.lexsort((np.arange(ds.n_users), -activity))
    active_users = order[:n_active]

    popularity = ds.item_positive_counts()
    candidates = pd.DataFrame({
        "user": ds.users,
        "item": ds.items,
        "feedback": ds.feedback,
        "popularity": popularity[ds.items],
    })
    in_pool = np.isin(
        ds.users * ds.n_items + ds.items,
        splits.train.keys(ds.n_items),
    )
    candidates = candidates[np.isin(ds.users, active_users) & in_pool]

    # ties go to the smallest item index
    chosen = (
        candidates.sort_values(["user", "feedback", "popularity", "item"], ascending=[True, False, False, True])
        .drop_duplicates(subset=["user", "feedback"], keep="first")
    )
    unbiased_val = PairSet(
        chosen["user"].to_numpy(dtype=np.int64),
        chosen["item"].to_numpy(dtype=np.int64),
        chosen["feedback"].to_numpy(dtype=np.int8),
    )

    one_sided = n_active - int(chosen.groupby("user").size().eq(2).sum())
    if one_sided:
        logger.warning(f"{one_sided} active users lack a positive or a negative item")

    train = splits.train.exclude(unbiased_val, ds.n_items)
    logger.info(
        f"Unbiased validation: {len(unbiased_val)} pairs from {n_active} active users "
        f"({int(unbiased_val.labels.sum())} positive)"
    )
    return splits.replace(train=train, unbiased_val=unbiased_val)


def split_hyper_validation(ds: Dataset, fraction: float = 0.1, seed: int = 0,
                           splits: Optional[SplitAssignment] = None) -> SplitAssignment:
    """Uniformly sample a fraction of the remaining train pairs into the hyper-validation set."""
    ensure(validate_fraction(fraction, "hyper-validation fraction", allow_one=False))
    splits = _initial_splits(ds, splits)

    pool = splits.train
    n_hyper = int(round(fraction * len(pool)))
    rng = seed_stream(seed, "split")
    chosen = np.sort(rng.choice(len(pool), size=n_hyper, replace=False))

    keep = np.ones(len(pool), dtype=bool)
    keep[chosen] = False
    hyper_val = pool.take(chosen)
    logger.info(f"Hyper-validation: {n_hyper} of {len(pool)} train pairs")
    return splits.replace(train=pool.take(np.flatnonzero(keep)), hyper_val=hyper_val)


def sample_test_pairs(ds: Dataset, fraction: float, seed: int) -> PairSet:
    """Uniform sample of observed interactions used as a test set when none is supplied."""
    ensure(validate_fraction(fraction, "test fraction", allow_one=False))
    rng = seed_stream(seed, "test")
    n_test = int(round(fraction * len(ds)))
    chosen = np.sort(rng.choice(len(ds), size=n_test, replace=False))
    return PairSet(ds.users[chosen], ds.items[chosen], ds.feedback[chosen])


def build_splits(ds: Dataset, active_fraction: float, hyper_fraction: float, seed: int,
                 test: Optional[PairSet] = None) -> SplitAssignment:
    """Full split pipeline: hold out test, build unbiased validation, then hyper-validation."""
    test = PairSet.empty() if test is None else test
    remaining = ds.without(test)
    pool = materialize_pairs(remaining).exclude(test, ds.n_items)
    splits = SplitAssignment(n_users=ds.n_users, n_items=ds.n_items, train=pool, test=test)
    splits = build_unbiased_validation(remaining, active_fraction, splits=splits)
    splits = split_hyper_validation(remaining, hyper_fraction, seed, splits=splits)
    return splits


def write_split_manifest(splits: SplitAssignment, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = [
        pd.DataFrame({
            "user": pairs.users,
            "item": pairs.items,
            "split_tag": tag.value,
            "label": pairs.labels.astype(np.int64),
        })
        for tag, pairs in splits.parts()
    ]
    pd.concat(frames, ignore_index=True).to_csv(
        path, sep="\t", header=False, index=False, columns=MANIFEST_COLUMNS, lineterminator="\n"
    )
    logger.info(f"Split manifest written to {path}")
    return path


def read_split_manifest(path: Union[str, Path], n_users: int, n_items: int) -> SplitAssignment:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Split manifest not found: {path}")
    frame = pd.read_csv(path, sep="\t", header=None, names=MANIFEST_COLUMNS,
                        dtype={"user": np.int64, "item": np.int64, "split_tag": str, "label": np.int8})

    unknown = set(frame["split_tag"]) - {tag.value for tag in SplitTag}
    if unknown:
        raise ValueError(f"Unknown split tags in {path}: {sorted(unknown)}")

    parts = {}
    for tag in SplitTag:
        rows = frame[frame["split_tag"] == tag.value]
        parts[tag.value] = PairSet(
            rows["user"].to_numpy(), rows["item"].to_numpy(), rows["label"].to_numpy()
        )
    return SplitAssignment(n_users=n_users, n_items=n_items, **parts)
