import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import torch
from loguru import logger

from app.exceptions import TrainingDivergedError
from app.models.containers import Dataset, SplitAssignment, SyntheticGroundTruth
from app.models.schemas import BilevelConfig, EstimatorKind, Method, OptimizerKind, TraceRecord, TrainTrace
from app.services.bilevel import hypergradient
from app.services.estimators import PairBatch, objective, to_batch
from app.services.exposure import (
    ExposureParams,
    ExposureSource,
    LearnedExposure,
    PopularityExposure,
    UnitExposure,
    init_exposure,
    popularity_from_pairs,
)
from app.services.metrics import mean_user_pcc, ranking_metrics
from app.services.model import FactorModel, init_model, score_matrix
from app.utils.helpers import torch_generator

CheckpointHook = Callable[[int, FactorModel, Optional[ExposureParams]], None]


@dataclass
class TrainResult:
    method: Method
    model: FactorModel
    exposure: Optional[ExposureParams]
    trace: TrainTrace


def make_optimizer(params: Sequence[torch.Tensor], lr: float, kind: OptimizerKind,
                   weight_decay: float = 0.0) -> torch.optim.Optimizer:
    if kind == OptimizerKind.ADAM:
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    return torch.optim.SGD(params, lr=lr, weight_decay=weight_decay)


def apply_gradients(optimizer: torch.optim.Optimizer, params: Sequence[torch.Tensor],
                    grads: Sequence[torch.Tensor]) -> None:
    for param, grad in zip(params, grads):
        param.grad = grad.detach()
    optimizer.step()


def descend(optimizer: torch.optim.Optimizer, params: Sequence[torch.Tensor], loss: torch.Tensor) -> None:
    apply_gradients(optimizer, params, torch.autograd.grad(loss, params, allow_unused=False))


class Trainer:
    """Shared epoch and mini-batch loop; subclasses define one optimisation step."""

    method: Method
    kind: EstimatorKind = EstimatorKind.UBO

    def __init__(self, splits: SplitAssignment, config: BilevelConfig,
                 ground_truth: Optional[SyntheticGroundTruth] = None,
                 on_checkpoint: Optional[CheckpointHook] = None):
        if len(splits.train) == 0:
            raise ValueError("training split is empty")
        if ground_truth is not None and ground_truth.shape != (splits.n_users, splits.n_items):
            raise ValueError("ground truth shape does not match the splits")

        self.splits = splits
        self.config = config
        self.ground_truth = ground_truth
        self.on_checkpoint = on_checkpoint

        self.model = init_model(splits.n_users, splits.n_items, config.dim, config.seed, config.init_scale)
        self.exposure_params: Optional[ExposureParams] = None
        self.source = self.build_source()

        self.train_pairs = to_batch(splits.train)
        self.val_pairs = to_batch(splits.unbiased_val)
        self.generator = torch_generator(config.seed, "sampling")
        self.model_optimizer = make_optimizer(
            self.model.parameters(), config.inner_lr, config.optimizer, config.weight_decay
        )
        self.exposure_optimizer = None
        if self.source.parameters():
            self.exposure_optimizer = make_optimizer(self.source.parameters(), config.outer_lr, config.optimizer)
        self.global_step = 0

    def build_source(self) -> ExposureSource:
        return UnitExposure()

    def step(self, batch: PairBatch) -> float:
        raise NotImplementedError

    @property
    def learns_exposure(self) -> bool:
        return self.exposure_params is not None

    def fit(self) -> TrainResult:
        config = self.config
        trace = TrainTrace(method=self.method, seed=config.seed)
        n_train = len(self.train_pairs)
        logger.info(
            f"Training {self.method.value} (seed {config.seed}): {n_train} train pairs, "
            f"{len(self.val_pairs)} validation pairs, {config.epochs} epochs"
        )

        for epoch in range(1, config.epochs + 1):
            order = torch.randperm(n_train, generator=self.generator)
            losses: List[float] = []
            pcc_points: List[Tuple[int, float]] = []

            for start in range(0, n_train, config.batch_size):
                batch = self.train_pairs.select(order[start:start + config.batch_size])
                loss = self.step(batch)
                self.global_step += 1
                self._guard(loss, epoch)
                losses.append(loss)
                if self.learns_exposure and self.ground_truth is not None \
                        and self.global_step % config.pcc_every == 0:
                    pcc_points.append((self.global_step, self.exposure_pcc()))

            record = self.epoch_record(epoch, losses, pcc_points)
            trace.records.append(record)
            logger.debug(
                f"{self.method.value} epoch {epoch}: train {record.train_loss:.6f}, "
                f"val {record.val_loss}, pcc {record.mean_pcc}"
            )
            if self.on_checkpoint and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                self.on_checkpoint(epoch, self.model, self.exposure_params)

        if trace.records:
            logger.info(f"Finished {self.method.value} (seed {config.seed}): final train loss {trace.records[-1].train_loss:.6f}")
        return TrainResult(self.method, self.model, self.exposure_params, trace)

    def _guard(self, loss: float, epoch: int) -> None:
        finite = math.isfinite(loss) and self.model.is_finite()
        if self.exposure_params is not None:
            finite = finite and self.exposure_params.is_finite()
        if not finite:
            logger.error(f"{self.method.value} diverged at epoch {epoch}, step {self.global_step}")
            raise TrainingDivergedError(self.method.value, epoch)

    def exposure_pcc(self) -> Optional[float]:
        try:
            return mean_user_pcc(self.source.matrix(self.model), self.ground_truth.m)
        except ValueError as e:
            logger.warning(f"PCC unavailable: {e}")
            return None

    def validation_loss(self) -> Optional[float]:
        if len(self.val_pairs) == 0:
            return None
        with torch.no_grad():
            return float(objective(self.model, UnitExposure(), self.val_pairs, EstimatorKind.NAIVE))

    def epoch_record(self, epoch: int, losses: List[float], pcc_points: List[Tuple[int, float]]) -> TraceRecord:
        metrics: Dict[str, float] = {}
        if len(self.splits.test):
            metrics = ranking_metrics(score_matrix(self.model), self.splits.test, self.config.ks)

        mean_pcc = None
        if self.ground_truth is not None and not isinstance(self.source, UnitExposure):
            mean_pcc = self.exposure_pcc()

        return TraceRecord(
            epoch=epoch,
            steps=self.global_step,
            train_loss=float(np.mean(losses)),
            val_loss=self.validation_loss(),
            metrics=metrics,
            mean_pcc=mean_pcc,
            pcc_by_step=[(s, p) for s, p in pcc_points if p is not None],
        )

    def sample_validation(self) -> PairBatch:
        size = min(len(self.val_pairs), self.config.batch_size)
        if size == len(self.val_pairs):
            return self.val_pairs
        index = torch.randperm(len(self.val_pairs), generator=self.generator)[:size]
        return self.val_pairs.select(index)

    def _theta(self):
        return popularity_from_pairs(self.splits.train, self.splits.n_items)

    def _learned_source(self) -> ExposureSource:
        self.exposure_params = init_exposure(
            self.splits.n_users, self.config.dim, self.config.seed, self.config.init_scale
        )
        return LearnedExposure(self.exposure_params, self._theta())


class NaiveTrainer(Trainer):
    method = Method.NAIVE
    kind = EstimatorKind.NAIVE

    def step(self, batch: PairBatch) -> float:
        loss = objective(self.model, self.source, batch, self.kind, self.config.clip_floor)
        descend(self.model_optimizer, self.model.parameters(), loss)
        return float(loss.detach())


class RelMFTrainer(NaiveTrainer):
    """Inverse propensity loss with popularity exposure."""
    method = Method.RELMF
    kind = EstimatorKind.IPS

    def build_source(self) -> ExposureSource:
        return PopularityExposure(self._theta(), floor=self.config.clip_floor)


class UMFTrainer(RelMFTrainer):
    """Low-variance loss with popularity exposure."""
    method = Method.UMF
    kind = EstimatorKind.UBO


class JointOptTrainer(Trainer):
    """One training loss, simultaneous steps on relevance and exposure parameters."""
    method = Method.JOINTOPT

    def build_source(self) -> ExposureSource:
        return self._learned_source()

    def step(self, batch: PairBatch) -> float:
        model_params = self.model.parameters()
        exposure_params = self.source.parameters()
        loss = objective(self.model, self.source, batch, EstimatorKind.UBO, self.config.clip_floor)
        grads = torch.autograd.grad(loss, model_params + exposure_params)
        apply_gradients(self.model_optimizer, model_params, grads[:len(model_params)])
        apply_gradients(self.exposure_optimizer, exposure_params, grads[len(model_params):])
        return float(loss.detach())


class AlterOptTrainer(JointOptTrainer):
    """Even steps move the relevance parameters, odd steps the exposure parameters."""
    method = Method.ALTEROPT

    def step(self, batch: PairBatch) -> float:
        loss = objective(self.model, self.source, batch, EstimatorKind.UBO, self.config.clip_floor)
        if self.global_step % 2 == 0:
            descend(self.model_optimizer, self.model.parameters(), loss)
        else:
            descend(self.exposure_optimizer, self.source.parameters(), loss)
        return float(loss.detach())


class UBOTrainer(Trainer):
    """Outer step on exposure through a one-step unroll, then the realised relevance step."""
    method = Method.UBO
    needs_validation = True

    def __init__(self, splits: SplitAssignment, config: BilevelConfig, **kwargs):
        if self.needs_validation and len(splits.unbiased_val) == 0:
            raise ValueError(f"{self.method.value} needs a nonempty unbiased validation set")
        super().__init__(splits, config, **kwargs)

    def build_source(self) -> ExposureSource:
        return self._learned_source()

    def outer_batch(self, batch: PairBatch) -> Tuple[PairBatch, Optional[ExposureSource]]:
        return self.sample_validation(), None

    def step(self, batch: PairBatch) -> float:
        val_batch, outer_source = self.outer_batch(batch)
        hyper = hypergradient(
            self.model, self.source, batch, val_batch, self.config.inner_lr,
            outer_exposure=outer_source, clip_floor=self.config.clip_floor,
        )
        apply_gradients(self.exposure_optimizer, self.source.parameters(), hyper.grads)

        loss = objective(self.model, self.source, batch, EstimatorKind.UBO, self.config.clip_floor)
        descend(self.model_optimizer, self.model.parameters(), loss)
        return float(loss.detach())


class BiOpt2Trainer(UBOTrainer):
    """UBO with the train batch standing in for validation, scored with learned exposure."""
    method = Method.BIOPT2
    needs_validation = False

    def outer_batch(self, batch: PairBatch) -> Tuple[PairBatch, Optional[ExposureSource]]:
        return batch, self.source


TRAINERS: Dict[Method, Type[Trainer]] = {
    Method.NAIVE: NaiveTrainer,
    Method.RELMF: RelMFTrainer,
    Method.UMF: UMFTrainer,
    Method.UBO: UBOTrainer,
    Method.JOINTOPT: JointOptTrainer,
    Method.ALTEROPT: AlterOptTrainer,
    Method.BIOPT2: BiOpt2Trainer,
}


def train_method(method: Method, ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
                 ground_truth: Optional[SyntheticGroundTruth] = None,
                 on_checkpoint: Optional[CheckpointHook] = None) -> TrainResult:
    if (ds.n_users, ds.n_items) != (splits.n_users, splits.n_items):
        raise ValueError("splits do not belong to this dataset")
    trainer = TRAINERS[Method(method)](splits, config, ground_truth=ground_truth, on_checkpoint=on_checkpoint)
    return trainer.fit()


def train_ubo(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
              ground_truth: Optional[SyntheticGroundTruth] = None) -> Tuple[FactorModel, ExposureParams, TrainTrace]:
    result = train_method(Method.UBO, ds, splits, config, ground_truth)
    return result.model, result.exposure, result.trace


def train_jointopt(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
                   ground_truth: Optional[SyntheticGroundTruth] = None
                   ) -> Tuple[FactorModel, ExposureParams, TrainTrace]:
    result = train_method(Method.JOINTOPT, ds, splits, config, ground_truth)
    return result.model, result.exposure, result.trace


def train_alteropt(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
                   ground_truth: Optional[SyntheticGroundTruth] = None
                   ) -> Tuple[FactorModel, ExposureParams, TrainTrace]:
    result = train_method(Method.ALTEROPT, ds, splits, config, ground_truth)
    return result.model, result.exposure, result.trace


def train_biopt2(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
                 ground_truth: Optional[SyntheticGroundTruth] = None
                 ) -> Tuple[FactorModel, ExposureParams, TrainTrace]:
    result = train_method(Method.BIOPT2, ds, splits, config, ground_truth)
    return result.model, result.exposure, result.trace


def train_relmf(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
                ground_truth: Optional[SyntheticGroundTruth] = None) -> Tuple[FactorModel, TrainTrace]:
    result = train_method(Method.RELMF, ds, splits, config, ground_truth)
    return result.model, result.trace


def train_umf(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
              ground_truth: Optional[SyntheticGroundTruth] = None) -> Tuple[FactorModel, TrainTrace]:
    result = train_method(Method.UMF, ds, splits, config, ground_truth)
    return result.model, result.trace


def train_naive(ds: Dataset, splits: SplitAssignment, config: BilevelConfig,
                ground_truth: Optional[SyntheticGroundTruth] = None) -> Tuple[FactorModel, TrainTrace]:
    result = train_method(Method.NAIVE, ds, splits, config, ground_truth)
    return result.model, result.trace
