"""Per-pair training losses, their derivatives in p and the gradient variance closed forms.

The scalar functions accept numpy arrays as well as floats so the variance
study and the unbiasedness study can evaluate whole grids at once.
"""
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from app.models.containers import PairSet
from app.models.schemas import EstimatorKind
from app.services.exposure import ExposureSource
from app.services.model import DTYPE, FactorModel, scores

ArrayLike = Union[float, np.ndarray]

# Largest double below one; keeps log1p(-x) finite
_ONE_MINUS = 1.0 - np.finfo(np.float64).eps / 2
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True, eq=False)
class PairLossContext:
    feedback: ArrayLike
    p: ArrayLike
    m_bar: ArrayLike = 1.0
    clip_floor: float = 0.01

    def __post_init__(self):
        feedback = np.asarray(self.feedback)
        p = np.asarray(self.p, dtype=np.float64)
        m_bar = np.asarray(self.m_bar, dtype=np.float64)
        if not np.isin(feedback, (0, 1)).all():
            raise ValueError("feedback must be 0 or 1")
        if ((p <= 0) | (p >= 1)).any():
            raise ValueError("p must lie in (0, 1)")
        if ((m_bar <= 0) | (m_bar > 1)).any():
            raise ValueError("m_bar must lie in (0, 1]")
        if not 0.0 < self.clip_floor <= 1.0:
            raise ValueError("clip_floor must lie in (0, 1]")

    @property
    def clipped_m_bar(self) -> ArrayLike:
        return np.maximum(self.m_bar, self.clip_floor)


def loss_naive(ctx: PairLossContext) -> ArrayLike:
    r, p = ctx.feedback, ctx.p
    return -(r * np.log(p) + (1 - r) * np.log1p(-p))


def loss_ips(ctx: PairLossContext) -> ArrayLike:
    r, p = ctx.feedback, ctx.p
    w = r / ctx.clipped_m_bar
    return -(w * np.log(p) + (1 - w) * np.log1p(-p))


def loss_ubo(ctx: PairLossContext) -> ArrayLike:
    r = ctx.feedback
    mp = np.clip(ctx.m_bar * ctx.p, _TINY, _ONE_MINUS)
    return -(r * np.log(mp) + (1 - r) * np.log1p(-mp))


def grad_naive_wrt_p(ctx: PairLossContext) -> ArrayLike:
    r, p = ctx.feedback, ctx.p
    return -(r / p - (1 - r) / (1 - p))


def grad_ips_wrt_p(ctx: PairLossContext) -> ArrayLike:
    r, p = ctx.feedback, ctx.p
    w = r / ctx.clipped_m_bar
    return -(w * (1 / p + 1 / (1 - p)) - 1 / (1 - p))


def grad_ubo_wrt_p(ctx: PairLossContext) -> ArrayLike:
    r, p, m = ctx.feedback, ctx.p, ctx.m_bar
    return -(r / p - (1 - r) * m / (1 - m * p))


def var_ips(gamma: ArrayLike, m_bar: ArrayLike, p: ArrayLike) -> ArrayLike:
    """Variance of grad_ips_wrt_p under R ~ Bernoulli(m_bar * gamma)."""
    return gamma * (1 - m_bar * gamma) / (m_bar * p ** 2 * (1 - p) ** 2)


def var_ubo(gamma: ArrayLike, m_bar: ArrayLike, p: ArrayLike) -> ArrayLike:
    """Variance of grad_ubo_wrt_p under R ~ Bernoulli(m_bar * gamma); bounded as m_bar goes to 0."""
    return m_bar * gamma * (1 - m_bar * gamma) / (p ** 2 * (1 - m_bar * p) ** 2)


def expected_loss(kind: EstimatorKind, gamma: ArrayLike, m: ArrayLike, p: ArrayLike,
                  m_bar: ArrayLike = None, clip_floor: float = 0.01) -> ArrayLike:
    """Per-pair loss averaged over R ~ Bernoulli(m * gamma), evaluated with estimate m_bar."""
    m_bar = m if m_bar is None else m_bar
    rate = np.asarray(m) * np.asarray(gamma)
    loss = LOSSES[kind]
    hit = loss(PairLossContext(1, p, m_bar, clip_floor))
    miss = loss(PairLossContext(0, p, m_bar, clip_floor))
    return rate * hit + (1 - rate) * miss


LOSSES = {
    EstimatorKind.NAIVE: loss_naive,
    EstimatorKind.IPS: loss_ips,
    EstimatorKind.UBO: loss_ubo,
}

GRADIENTS = {
    EstimatorKind.NAIVE: grad_naive_wrt_p,
    EstimatorKind.IPS: grad_ips_wrt_p,
    EstimatorKind.UBO: grad_ubo_wrt_p,
}


class PairBatch(NamedTuple):
    """Torch view of a PairSet."""
    users: torch.Tensor
    items: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return len(self.users)

    def select(self, index: torch.Tensor) -> "PairBatch":
        return PairBatch(self.users[index], self.items[index], self.labels[index])


def to_batch(pairs: PairSet) -> PairBatch:
    return PairBatch(
        torch.tensor(pairs.users, dtype=torch.long),
        torch.tensor(pairs.items, dtype=torch.long),
        torch.tensor(pairs.labels, dtype=DTYPE),
    )


def pair_losses(kind: EstimatorKind, labels: torch.Tensor, logits: torch.Tensor,
                m_bar: torch.Tensor, clip_floor: float = 0.01) -> torch.Tensor:
    """Per-pair losses from raw relevance scores.

    Works on logits so that log p and log(1 - p) stay finite for saturated
    scores. Positive pairs never touch the log(1 - m_bar p) branch, so their
    loss carries no dependence on m_bar through the relevance parameters.
    """
    log_p = F.logsigmoid(logits)
    log_q = F.logsigmoid(-logits)
    if kind == EstimatorKind.NAIVE:
        return -(labels * log_p + (1 - labels) * log_q)
    if kind == EstimatorKind.IPS:
        w = labels / m_bar.clamp(min=clip_floor)
        return -(w * log_p + (1 - w) * log_q)
    if kind == EstimatorKind.UBO:
        log_m = torch.log(m_bar.clamp(min=_TINY))
        # log(1 - m p) = log(sigmoid(-s) + (1 - m) sigmoid(s))
        miss = torch.logaddexp(log_q, torch.log1p(-m_bar.clamp(max=_ONE_MINUS)) + log_p)
        return -(labels * (log_m + log_p) + (1 - labels) * miss)
    raise ValueError(f"unknown estimator kind {kind}")


def objective(model: FactorModel, exposure: ExposureSource, batch: PairBatch, kind: EstimatorKind,
              clip_floor: float = 0.01, reduction: str = "mean") -> torch.Tensor:
    """Differentiable batch loss in the relevance and exposure parameters."""
    if len(batch) == 0:
        raise ValueError("loss over an empty pair set")
    logits = scores(model, batch.users, batch.items)
    m_bar = exposure.m_bar(batch.users, batch.items, model.item_emb)
    losses = pair_losses(kind, batch.labels, logits, m_bar, clip_floor)
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    raise ValueError(f"unknown reduction {reduction}")


@dataclass
class BatchLoss:
    loss: float
    grads: Dict[str, torch.Tensor]


GRAD_NAMES = ["user_emb", "item_emb"]


def batch_loss(pairs: Union[PairSet, PairBatch], model: FactorModel, exposure: ExposureSource,
               kind: EstimatorKind, clip_floor: float = 0.01) -> BatchLoss:
    """Mean loss over the pairs and its gradients for the model and any learned exposure parameters."""
    batch = to_batch(pairs) if isinstance(pairs, PairSet) else pairs
    params: List[torch.Tensor] = model.parameters() + exposure.parameters()
    loss = objective(model, exposure, batch, kind, clip_floor)
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    names = GRAD_NAMES + exposure.parameter_names()
    return BatchLoss(
        loss=float(loss.detach()),
        grads={
            name: torch.zeros_like(param) if grad is None else grad
            for name, param, grad in zip(names, params, grads)
        },
    )
