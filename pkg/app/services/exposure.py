from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from app.models.containers import Dataset, PairSet
from app.services.model import DTYPE, FactorModel
from app.utils.helpers import seed_stream


@dataclass(frozen=True, eq=False)
class PopularityTable:
    """Square-root normalised positive counts per item."""
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).copy()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1:
            raise ValueError("theta must be a vector")
        if (theta < 0).any() or (theta > 1).any():
            raise ValueError("theta entries must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.theta)

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.theta, dtype=DTYPE)

    def clipped(self, floor: float) -> np.ndarray:
        return np.maximum(self.theta, floor)


def popularity_from_counts(counts: np.ndarray) -> PopularityTable:
    counts = np.asarray(counts, dtype=np.float64)
    top = counts.max() if len(counts) else 0.0
    if top <= 0:
        raise ValueError("popularity needs at least one positive interaction")
    return PopularityTable(np.sqrt(counts / top))


def compute_popularity(ds: Dataset) -> PopularityTable:
    return popularity_from_counts(ds.item_positive_counts())


def popularity_from_pairs(pairs: PairSet, n_items: int) -> PopularityTable:
    """Popularity over a split, e.g. the training pairs only."""
    counts = np.bincount(pairs.items, weights=pairs.labels, minlength=n_items)
    return popularity_from_counts(counts)


@dataclass(eq=False)
class ExposureParams:
    """Per-user exposure embeddings plus a one-layer sigmoid gate over item embeddings."""
    user_exp_emb: torch.Tensor
    gate_weight: torch.Tensor
    gate_bias: torch.Tensor

    def __post_init__(self):
        if self.user_exp_emb.ndim != 2:
            raise ValueError("user_exp_emb must be a matrix")
        if self.gate_weight.shape != (self.user_exp_emb.shape[1],):
            raise ValueError("gate_weight must match the embedding dimension")
        if self.gate_bias.ndim != 0:
            raise ValueError("gate_bias must be a scalar tensor")

    @property
    def dim(self) -> int:
        return self.user_exp_emb.shape[1]

    def parameters(self) -> List[torch.Tensor]:
        return [self.user_exp_emb, self.gate_weight, self.gate_bias]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())

    def clone(self) -> "ExposureParams":
        return ExposureParams(*(p.detach().clone().requires_grad_(True) for p in self.parameters()))


def init_exposure(n_users: int, dim: int, seed: int = 0, scale: float = 0.1) -> ExposureParams:
    """e_u like the relevance embeddings, gate at zero so r starts at 0.5."""
    rng = seed_stream(seed, "exposure-init")
    return ExposureParams(
        user_exp_emb=torch.tensor(rng.normal(0.0, scale, size=(n_users, dim)), dtype=DTYPE, requires_grad=True),
        gate_weight=torch.zeros(dim, dtype=DTYPE, requires_grad=True),
        gate_bias=torch.zeros((), dtype=DTYPE, requires_grad=True),
    )


def gate_values(params: ExposureParams, item_emb: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(item_emb @ params.gate_weight + params.gate_bias)


def gate(params: ExposureParams, item_emb) -> float:
    """r(w_i) for a single item embedding."""
    item_emb = torch.as_tensor(item_emb, dtype=DTYPE)
    if item_emb.shape != (params.dim,):
        raise ValueError(f"item embedding must have dimension {params.dim}")
    with torch.no_grad():
        return float(gate_values(params, item_emb))


def learned_exposure(params: ExposureParams, theta: torch.Tensor, users: torch.Tensor,
                     items: torch.Tensor, item_emb: torch.Tensor) -> torch.Tensor:
    """Differentiable m_bar for a batch of pairs; `item_emb` is the full item table."""
    w = item_emb[items]
    r = gate_values(params, w)
    user_term = torch.sigmoid((params.user_exp_emb[users] * w).sum(dim=-1))
    return r * user_term + (1.0 - r) * theta[items]


def estimate_exposure(params: ExposureParams, model: FactorModel, theta: PopularityTable, u: int, i: int) -> float:
    users = torch.tensor([u])
    items = torch.tensor([i])
    with torch.no_grad():
        return float(learned_exposure(params, theta.as_tensor(), users, items, model.item_emb)[0])


def exposure_matrix(params: ExposureParams, model: FactorModel, theta: PopularityTable) -> np.ndarray:
    """Dense N x M matrix of learned exposure estimates."""
    with torch.no_grad():
        r = gate_values(params, model.item_emb)
        user_term = torch.sigmoid(params.user_exp_emb @ model.item_emb.T)
        m_bar = r * user_term + (1.0 - r) * theta.as_tensor()
    return m_bar.numpy()


class ExposureSource(ABC):
    """Where a loss takes its exposure estimates from."""

    @abstractmethod
    def m_bar(self, users: torch.Tensor, items: torch.Tensor, item_emb: torch.Tensor) -> torch.Tensor:
        ...

    def parameters(self) -> List[torch.Tensor]:
        return []

    def parameter_names(self) -> List[str]:
        return []

    def matrix(self, model: FactorModel) -> np.ndarray:
        n_users, n_items = model.n_users, model.n_items
        users, items = torch.meshgrid(torch.arange(n_users), torch.arange(n_items), indexing="ij")
        with torch.no_grad():
            values = self.m_bar(users.reshape(-1), items.reshape(-1), model.item_emb)
        return values.reshape(n_users, n_items).numpy()


class LearnedExposure(ExposureSource):
    def __init__(self, params: ExposureParams, theta: PopularityTable):
        self.params = params
        self.theta = theta
        self._theta = theta.as_tensor()

    def m_bar(self, users, items, item_emb):
        return learned_exposure(self.params, self._theta, users, items, item_emb)

    def parameters(self) -> List[torch.Tensor]:
        return self.params.parameters()

    def parameter_names(self) -> List[str]:
        return ["user_exp_emb", "gate_weight", "gate_bias"]

    def matrix(self, model: FactorModel) -> np.ndarray:
        return exposure_matrix(self.params, model, self.theta)


class PopularityExposure(ExposureSource):
    """Item popularity as exposure, floored so unseen items keep a nonzero estimate."""

    def __init__(self, theta: PopularityTable, floor: float = 0.0):
        self.theta = theta
        self.floor = floor
        self._theta = torch.tensor(theta.clipped(floor), dtype=DTYPE)

    def m_bar(self, users, items, item_emb):
        return self._theta[items]


class OracleExposure(ExposureSource):
    """True exposure probabilities of a semi-synthetic ground truth."""

    def __init__(self, m: np.ndarray):
        self._m = torch.tensor(np.asarray(m, dtype=np.float64), dtype=DTYPE)

    def m_bar(self, users, items, item_emb):
        return self._m[users, items]


class UnitExposure(ExposureSource):
    def m_bar(self, users, items, item_emb):
        return torch.ones(len(users), dtype=DTYPE)


class PairwiseExposure(ExposureSource):
    """Free m_bar parameter per pair of one fixed batch."""

    def __init__(self, values):
        self.values = torch.as_tensor(values, dtype=DTYPE).detach().clone().requires_grad_(True)

    def m_bar(self, users, items, item_emb):
        if len(users) != len(self.values):
            raise ValueError(f"batch of {len(users)} pairs does not match {len(self.values)} free exposures")
        return self.values

    def parameters(self) -> List[torch.Tensor]:
        return [self.values]

    def parameter_names(self) -> List[str]:
        return ["m_bar"]

