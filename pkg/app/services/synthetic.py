from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import expit

from app.models.containers import Dataset, PairSet, SyntheticGroundTruth
from app.models.schemas import PairUniverse, SynthConfig
from app.services.exposure import popularity_from_counts
from app.services.ratings import dataset_from_matrix
from app.utils.helpers import seed_stream

GROUND_TRUTH_COLUMNS = ["user", "item", "gamma", "m"]


def filter_base(base: Dataset, config: SynthConfig) -> Dataset:
    """Drop sparse users then sparse items, keep the first users and items up to the caps."""
    user_counts = np.bincount(base.users, minlength=base.n_users)
    keep_user = user_counts >= config.min_user_interactions
    rows = keep_user[base.users]

    item_counts = np.bincount(base.items[rows], minlength=base.n_items)
    keep_item = item_counts >= config.min_item_interactions

    keep_user &= np.cumsum(keep_user) <= config.max_users
    keep_item &= np.cumsum(keep_item) <= config.max_items
    rows = keep_user[base.users] & keep_item[base.items]

    user_index = np.cumsum(keep_user) - 1
    item_index = np.cumsum(keep_item) - 1
    kept_users = np.flatnonzero(keep_user)
    kept_items = np.flatnonzero(keep_item)
    filtered = Dataset(
        n_users=len(kept_users),
        n_items=len(kept_items),
        users=user_index[base.users[rows]],
        items=item_index[base.items[rows]],
        feedback=base.feedback[rows],
        pair_universe=base.pair_universe,
        ratings=None if base.ratings is None else base.ratings[rows],
        user_ids=tuple(base.user_ids[u] for u in kept_users) if base.user_ids else (),
        item_ids=tuple(base.item_ids[i] for i in kept_items) if base.item_ids else (),
    )
    logger.info(
        f"Filtered base data to {filtered.n_users} users, {filtered.n_items} items, "
        f"{len(filtered)} interactions"
    )
    return filtered


def build_ground_truth(ds: Dataset, config: SynthConfig) -> SyntheticGroundTruth:
    """Relevance from ratings, exposure from item popularity and user activity."""
    n_users, n_items = ds.n_users, ds.n_items
    positives = (ds.ratings >= config.positive_threshold) if ds.ratings is not None else ds.feedback.astype(bool)

    if config.constant_gamma is not None:
        gamma = np.full((n_users, n_items), config.constant_gamma)
    else:
        if ds.ratings is None:
            raise ValueError("relevance recipe needs ratings; set constant_gamma for binary data")
        gamma = np.full((n_users, n_items), positives.sum() / (n_users * n_items))
        gamma[ds.users, ds.items] = expit(config.gamma_slope * (ds.ratings - config.gamma_offset))

    if config.constant_exposure is not None:
        m = np.full((n_users, n_items), config.constant_exposure)
    else:
        item_counts = np.bincount(ds.items, weights=positives, minlength=n_items)
        user_counts = np.bincount(ds.users, weights=positives, minlength=n_users)
        if item_counts.max() > 0:
            theta = popularity_from_counts(item_counts).theta
        else:
            theta = np.zeros(n_items)
        top_user = max(user_counts.max(), 1.0)
        activity = np.maximum(np.sqrt(user_counts / top_user), config.exposure_floor)
        theta = np.maximum(theta, config.exposure_floor)
        m = np.outer(activity ** config.activity_power, theta ** config.popularity_power)
        m = np.clip(m, np.finfo(np.float64).tiny, 1.0)

    return SyntheticGroundTruth(gamma=gamma, m=m)


def sample_feedback(truth: SyntheticGroundTruth, seed: int) -> np.ndarray:
    """Observed feedback R * O with R ~ Bernoulli(gamma), O ~ Bernoulli(m)."""
    rng = seed_stream(seed, "synthesis")
    relevant = rng.random(truth.shape) < truth.gamma
    exposed = rng.random(truth.shape) < truth.m
    return (relevant & exposed).astype(np.int8)


def generate_semi_synthetic(base: Dataset, config: SynthConfig = SynthConfig(),
                            seed: int = 0) -> Tuple[Dataset, SyntheticGroundTruth]:
    filtered = filter_base(base, config)
    if filtered.n_users == 0 or filtered.n_items == 0:
        raise ValueError(
            f"filters (min {config.min_user_interactions} per user, "
            f"{config.min_item_interactions} per item) left an empty dataset"
        )

    truth = build_ground_truth(filtered, config)
    feedback = sample_feedback(truth, seed)
    ds = dataset_from_matrix(feedback, pair_universe=PairUniverse.GRID)
    logger.info(
        f"Generated semi-synthetic data: {ds.n_users}x{ds.n_items}, "
        f"positive rate {feedback.mean():.4f}, mean exposure {truth.m.mean():.4f}"
    )
    return ds, truth


def draw_synthetic_test(truth: SyntheticGroundTruth, items_per_user: int, seed: int) -> PairSet:
    """Uniformly chosen items per user labelled by relevance alone, as under random exposure."""
    n_users, n_items = truth.shape
    k = min(items_per_user, n_items)
    if k == 0:
        return PairSet.empty()

    rng = seed_stream(seed, "test")
    items = np.argsort(rng.random((n_users, n_items)), axis=1)[:, :k]
    items = np.sort(items, axis=1)
    users = np.repeat(np.arange(n_users), k)
    items = items.reshape(-1)
    labels = (rng.random(len(users)) < truth.gamma[users, items]).astype(np.int8)
    return PairSet(users, items, labels)


def write_ground_truth(truth: SyntheticGroundTruth, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_users, n_items = truth.shape
    users, items = np.divmod(np.arange(n_users * n_items), n_items)
    frame = pd.DataFrame({
        "user": users,
        "item": items,
        "gamma": truth.gamma.reshape(-1),
        "m": truth.m.reshape(-1),
    })
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.9g", lineterminator="\n")
    logger.info(f"Ground truth written to {path}")
    return path


def read_ground_truth(path: Union[str, Path]) -> SyntheticGroundTruth:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Ground-truth file not found: {path}")
    frame = pd.read_csv(path, sep="\t", header=None, names=GROUND_TRUTH_COLUMNS,
                        dtype={"user": np.int64, "item": np.int64, "gamma": np.float64, "m": np.float64})
    n_users = int(frame["user"].max()) + 1
    n_items = int(frame["item"].max()) + 1
    if len(frame) != n_users * n_items:
        raise ValueError(f"{path} does not cover the full {n_users}x{n_items} grid")

    gamma = np.zeros((n_users, n_items))
    m = np.zeros((n_users, n_items))
    users = frame["user"].to_numpy()
    items = frame["item"].to_numpy()
    gamma[users, items] = frame["gamma"].to_numpy()
    m[users, items] = frame["m"].to_numpy()
    return SyntheticGroundTruth(gamma=gamma, m=m)
