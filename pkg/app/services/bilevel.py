"""One-step unrolled bi-level machinery.

The inner update is recorded with `create_graph=True`, so the virtual
parameters stay a differentiable function of the exposure parameters and
the hypergradient is the exact derivative of the composed map.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
from scipy.special import expit

from app.models.schemas import EstimatorKind
from app.services.estimators import PairBatch, objective
from app.services.exposure import ExposureSource, PairwiseExposure, UnitExposure
from app.services.model import DTYPE, FactorModel


def inner_step(model: FactorModel, exposure: ExposureSource, train_batch: PairBatch, lr: float,
               clip_floor: float = 0.01, create_graph: bool = True) -> FactorModel:
    """Virtual SGD step on the relevance parameters under the UBO training loss."""
    if len(train_batch) == 0:
        raise ValueError("inner step needs a nonempty train batch")
    loss = objective(model, exposure, train_batch, EstimatorKind.UBO, clip_floor)
    grad_user, grad_item = torch.autograd.grad(loss, model.parameters(), create_graph=create_graph)
    return FactorModel(model.user_emb - lr * grad_user, model.item_emb - lr * grad_item)


@dataclass
class Hypergradient:
    grads: List[torch.Tensor]
    val_loss: float

    def flat(self) -> np.ndarray:
        return torch.cat([g.reshape(-1) for g in self.grads]).detach().numpy()


def hypergradient(model: FactorModel, exposure: ExposureSource, train_batch: PairBatch,
                  val_batch: PairBatch, lr: float, outer_exposure: Optional[ExposureSource] = None,
                  clip_floor: float = 0.01) -> Hypergradient:
    """d L_val(w'(alpha)) / d alpha through one recorded inner step.

    With no `outer_exposure` the validation pairs are taken as fully exposed,
    which is the unbiased-validation objective. Passing the learned source
    instead scores the virtual model with learned exposure.
    """
    if len(val_batch) == 0:
        raise ValueError("hypergradient needs a nonempty validation batch")
    params = exposure.parameters()
    if not params:
        raise ValueError("exposure source has no parameters to differentiate")

    virtual = inner_step(model, exposure, train_batch, lr, clip_floor)
    if outer_exposure is None:
        val_loss = objective(virtual, UnitExposure(), val_batch, EstimatorKind.NAIVE)
    else:
        val_loss = objective(virtual, outer_exposure, val_batch, EstimatorKind.UBO, clip_floor)

    grads = torch.autograd.grad(val_loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    return Hypergradient(grads=grads, val_loss=float(val_loss.detach()))


def composed_val_loss(model: FactorModel, exposure: ExposureSource, train_batch: PairBatch,
                      val_batch: PairBatch, lr: float, clip_floor: float = 0.01) -> float:
    """alpha -> L_val(w - lr * grad L_train(w, alpha)), evaluated without a recorded graph."""
    virtual = inner_step(model, exposure, train_batch, lr, clip_floor, create_graph=False)
    with torch.no_grad():
        return float(objective(virtual, UnitExposure(), val_batch, EstimatorKind.NAIVE))


@dataclass(frozen=True, eq=False)
class ValGradScenario:
    """One negative train pair (user, item) and four validation pairs around it.

    `user` likes `liked_item` and dislikes `disliked_item`; `liking_user`
    likes `item` and `disliking_user` dislikes it.
    """
    user_emb: np.ndarray
    item_emb: np.ndarray
    user: int
    item: int
    liked_item: int
    disliked_item: int
    liking_user: int
    disliking_user: int
    m_bar: float
    lr: float

    def __post_init__(self):
        if self.item in (self.liked_item, self.disliked_item):
            raise ValueError("validation items of the train user must differ from the train item")
        if self.user in (self.liking_user, self.disliking_user):
            raise ValueError("validation users of the train item must differ from the train user")
        if not 0.0 < self.m_bar <= 1.0:
            raise ValueError("m_bar must lie in (0, 1]")

    def model(self) -> FactorModel:
        return FactorModel(
            torch.tensor(self.user_emb, dtype=DTYPE, requires_grad=True),
            torch.tensor(self.item_emb, dtype=DTYPE, requires_grad=True),
        )

    def train_batch(self) -> PairBatch:
        return PairBatch(torch.tensor([self.user]), torch.tensor([self.item]), torch.zeros(1, dtype=DTYPE))

    def val_batch(self) -> PairBatch:
        users = [self.user, self.user, self.liking_user, self.disliking_user]
        items = [self.liked_item, self.disliked_item, self.item, self.item]
        return PairBatch(torch.tensor(users), torch.tensor(items), torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=DTYPE))


def closed_form_val_grad(scenario: ValGradScenario) -> float:
    """Derivative of the four-pair validation loss in m_bar of the negative train pair."""
    U, V = scenario.user_emb, scenario.item_emb
    u, i = scenario.user, scenario.item
    i1, i2 = scenario.liked_item, scenario.disliked_item
    u1, u2 = scenario.liking_user, scenario.disliking_user
    m, lr = scenario.m_bar, scenario.lr

    s = expit(U[u] @ V[i])
    prefactor = lr * s * (1 - s) / (1 - m * s) ** 2

    # scores after the inner step
    step = lr * m * s * (1 - s) / (1 - m * s)
    user_next = U[u] - step * V[i]
    item_next = V[i] - step * U[u]

    bracket = (
        (V[i1] @ V[i]) * expit(-(user_next @ V[i1]))
        - (V[i2] @ V[i]) * expit(user_next @ V[i2])
        + (U[u1] @ U[u]) * expit(-(U[u1] @ item_next))
        - (U[u2] @ U[u]) * expit(U[u2] @ item_next)
    )
    return float(prefactor * bracket)


def scenario_val_loss(scenario: ValGradScenario, m_bar: float) -> float:
    """Summed validation loss of the scenario after one inner step taken at `m_bar`."""
    model = scenario.model()
    exposure = PairwiseExposure([m_bar])
    virtual = inner_step(model, exposure, scenario.train_batch(), scenario.lr, create_graph=False)
    with torch.no_grad():
        return float(objective(virtual, UnitExposure(), scenario.val_batch(), EstimatorKind.NAIVE, reduction="sum"))


def scenario_autograd_grad(scenario: ValGradScenario) -> float:
    """Same derivative as `closed_form_val_grad`, by differentiating the recorded unroll."""
    exposure = PairwiseExposure([scenario.m_bar])
    result = hypergradient(scenario.model(), exposure, scenario.train_batch(), scenario.val_batch(), scenario.lr)
    # hypergradient averages the four validation terms
    return 4.0 * float(result.grads[0][0])


def free_exposure_grads(model: FactorModel, train_batch: PairBatch, val_batch: PairBatch,
                        lr: float, m_bar: Optional[np.ndarray] = None) -> torch.Tensor:
    """Hypergradient over one free m_bar per train pair."""
    if m_bar is None:
        m_bar = np.full(len(train_batch), 0.5)
    exposure = PairwiseExposure(m_bar)
    return hypergradient(model, exposure, train_batch, val_batch, lr).grads[0]
