from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from loguru import logger

from app.utils.helpers import seed_stream

DTYPE = torch.float64
_P_MIN = torch.finfo(DTYPE).tiny
_P_MAX = 1.0 - torch.finfo(DTYPE).eps / 2


def stable_sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Logistic function that never returns exactly 0 or 1."""
    return torch.sigmoid(x).clamp(_P_MIN, _P_MAX)


@dataclass(eq=False)
class FactorModel:
    """Relevance parameters: user and item embedding tables of a shared dimension."""
    user_emb: torch.Tensor
    item_emb: torch.Tensor

    def __post_init__(self):
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2:
            raise ValueError("embedding tables must be matrices")
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("user and item tables must share the embedding dimension")

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    def parameters(self) -> List[torch.Tensor]:
        return [self.user_emb, self.item_emb]

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.user_emb).all() and torch.isfinite(self.item_emb).all())

    def clone(self) -> "FactorModel":
        """Detached copy that is itself trainable."""
        return FactorModel(
            self.user_emb.detach().clone().requires_grad_(True),
            self.item_emb.detach().clone().requires_grad_(True),
        )


def init_model(n_users: int, n_items: int, dim: int = 50, seed: int = 0, scale: float = 0.1) -> FactorModel:
    """Gaussian initialisation with standard deviation `scale`."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")

    rng = seed_stream(seed, "init")
    user_emb = rng.normal(0.0, scale, size=(n_users, dim))
    item_emb = rng.normal(0.0, scale, size=(n_items, dim))
    logger.debug(f"Initialised factor model {n_users}x{n_items}, dim {dim}, scale {scale}")
    return FactorModel(
        torch.tensor(user_emb, dtype=DTYPE, requires_grad=True),
        torch.tensor(item_emb, dtype=DTYPE, requires_grad=True),
    )


def scores(model: FactorModel, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
    """Dot products of the selected user and item rows."""
    return (model.user_emb[users] * model.item_emb[items]).sum(dim=-1)


def relevance_score(model: FactorModel, u: int, i: int) -> float:
    with torch.no_grad():
        return float(model.user_emb[u] @ model.item_emb[i])


def predict_relevance(model: FactorModel, u: int, i: int) -> float:
    with torch.no_grad():
        return float(stable_sigmoid(model.user_emb[u] @ model.item_emb[i]))


def score_matrix(model: FactorModel) -> np.ndarray:
    with torch.no_grad():
        return (model.user_emb @ model.item_emb.T).numpy()
