from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from app.models.schemas import PairUniverse, SplitTag


class Interaction(NamedTuple):
    """One observed (user, item, feedback) record."""
    user: int
    item: int
    feedback: int


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(array, dtype=dtype)
    if out is array:
        out = out.copy()
    out.setflags(write=False)
    return out


def pair_keys(users: np.ndarray, items: np.ndarray, n_items: int) -> np.ndarray:
    return users.astype(np.int64) * n_items + items.astype(np.int64)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binarised implicit feedback over dense user and item index spaces."""
    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    feedback: np.ndarray
    pair_universe: PairUniverse = PairUniverse.OBSERVED
    ratings: Optional[np.ndarray] = None
    user_ids: Tuple[str, ...] = ()
    item_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "users", _frozen(self.users, np.int64))
        object.__setattr__(self, "items", _frozen(self.items, np.int64))
        object.__setattr__(self, "feedback", _frozen(self.feedback, np.int8))
        if self.ratings is not None:
            object.__setattr__(self, "ratings", _frozen(self.ratings, np.float64))

        n = len(self.users)
        if len(self.items) != n or len(self.feedback) != n:
            raise ValueError("users, items and feedback must have equal length")
        if self.ratings is not None and len(self.ratings) != n:
            raise ValueError("ratings must align with interactions")
        if self.n_users < 0 or self.n_items < 0:
            raise ValueError("index space sizes must be non-negative")
        if n > self.n_users * self.n_items:
            raise ValueError("more interactions than (user, item) pairs")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            if not np.isin(self.feedback, (0, 1)).all():
                raise ValueError("feedback must be 0 or 1")
            keys = pair_keys(self.users, self.items, self.n_items)
            if len(np.unique(keys)) != n:
                raise ValueError("duplicate (user, item) pairs")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def interactions(self) -> List[Interaction]:
        return [Interaction(int(u), int(i), int(f)) for u, i, f in zip(self.users, self.items, self.feedback)]

    @property
    def n_positive(self) -> int:
        return int(self.feedback.sum())

    def item_positive_counts(self) -> np.ndarray:
        return np.bincount(self.items, weights=self.feedback, minlength=self.n_items).astype(np.int64)

    def user_positive_counts(self) -> np.ndarray:
        return np.bincount(self.users, weights=self.feedback, minlength=self.n_users).astype(np.int64)

    def feedback_matrix(self) -> np.ndarray:
        dense = np.zeros((self.n_users, self.n_items), dtype=np.int8)
        dense[self.users, self.items] = self.feedback
        return dense

    def without(self, pairs: "PairSet") -> "Dataset":
        """Copy of the dataset with the given pairs removed."""
        drop = np.isin(pair_keys(self.users, self.items, self.n_items), pairs.keys(self.n_items))
        keep = ~drop
        return Dataset(
            n_users=self.n_users,
            n_items=self.n_items,
            users=self.users[keep],
            items=self.items[keep],
            feedback=self.feedback[keep],
            pair_universe=self.pair_universe,
            ratings=None if self.ratings is None else self.ratings[keep],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )


@dataclass(frozen=True, eq=False)
class PairSet:
    """Labelled (user, item) pairs in parallel arrays."""
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "users", _frozen(self.users, np.int64))
        object.__setattr__(self, "items", _frozen(self.items, np.int64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int8))
        if not (len(self.users) == len(self.items) == len(self.labels)):
            raise ValueError("users, items and labels must have equal length")
        if len(self.labels) and not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @classmethod
    def empty(cls) -> "PairSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8))

    def __len__(self) -> int:
        return len(self.users)

    def keys(self, n_items: int) -> np.ndarray:
        return pair_keys(self.users, self.items, n_items)

    def take(self, index: np.ndarray) -> "PairSet":
        return PairSet(self.users[index], self.items[index], self.labels[index])

    def exclude(self, other: "PairSet", n_items: int) -> "PairSet":
        keep = ~np.isin(self.keys(n_items), other.keys(n_items))
        return self.take(np.flatnonzero(keep))

    @classmethod
    def concat(cls, parts: List["PairSet"]) -> "PairSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    """Disjoint train / unbiased-validation / hyper-validation / test pairs."""
    n_users: int
    n_items: int
    train: PairSet
    unbiased_val: PairSet = field(default_factory=PairSet.empty)
    hyper_val: PairSet = field(default_factory=PairSet.empty)
    test: PairSet = field(default_factory=PairSet.empty)

    def __post_init__(self):
        seen = np.zeros(0, dtype=np.int64)
        for tag, pairs in self.parts():
            keys = pairs.keys(self.n_items)
            if len(np.unique(keys)) != len(keys):
                raise ValueError(f"duplicate pairs inside {tag.value}")
            if np.isin(keys, seen).any():
                raise ValueError(f"{tag.value} overlaps another split")
            seen = np.concatenate([seen, keys])

    def parts(self) -> Iterator[Tuple[SplitTag, PairSet]]:
        yield SplitTag.TRAIN, self.train
        yield SplitTag.UNBIASED_VAL, self.unbiased_val
        yield SplitTag.HYPER_VAL, self.hyper_val
        yield SplitTag.TEST, self.test

    def replace(self, **changes) -> "SplitAssignment":
        values = {tag.value: pairs for tag, pairs in self.parts()}
        values.update(changes)
        return SplitAssignment(n_users=self.n_users, n_items=self.n_items, **values)


@dataclass(frozen=True, eq=False)
class SyntheticGroundTruth:
    """True relevance and exposure Bernoulli parameters on the full grid."""
    gamma: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", _frozen(self.gamma, np.float64))
        object.__setattr__(self, "m", _frozen(self.m, np.float64))
        if self.gamma.shape != self.m.shape or self.gamma.ndim != 2:
            raise ValueError("gamma and m must be matrices of equal shape")
        if (self.gamma < 0).any() or (self.gamma > 1).any():
            raise ValueError("gamma entries must lie in [0, 1]")
        if (self.m <= 0).any() or (self.m > 1).any():
            raise ValueError("m entries must lie in (0, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gamma.shape
