import numpy as np
import pytest
import torch

from app.exceptions import TrainingDivergedError
from app.models.containers import PairSet, SyntheticGroundTruth
from app.models.schemas import BilevelConfig, Method, OptimizerKind
from app.services.exposure import LearnedExposure, PopularityExposure, UnitExposure, init_exposure
from app.services.model import init_model
from app.services.ratings import dataset_from_matrix
from app.services.splits import build_splits, sample_test_pairs
from app.services.trainers import (
    TRAINERS,
    AlterOptTrainer,
    JointOptTrainer,
    NaiveTrainer,
    train_alteropt,
    train_biopt2,
    train_jointopt,
    train_method,
    train_naive,
    train_relmf,
    train_ubo,
    train_umf,
)


@pytest.fixture(scope="module")
def instance():
    rng = np.random.default_rng(0)
    truth = SyntheticGroundTruth(
        gamma=rng.uniform(0.05, 0.95, (16, 12)),
        m=np.outer(rng.uniform(0.3, 1.0, 16), np.linspace(0.05, 1.0, 12)),
    )
    feedback = ((rng.random(truth.shape) < truth.gamma) & (rng.random(truth.shape) < truth.m)).astype(np.int8)
    ds = dataset_from_matrix(feedback)
    splits = build_splits(ds, active_fraction=0.5, hyper_fraction=0.1, seed=0, test=sample_test_pairs(ds, 0.2, 0))
    return ds, splits, truth


def small_config(**changes) -> BilevelConfig:
    values = dict(epochs=2, batch_size=32, dim=3, inner_lr=0.05, outer_lr=0.05, seed=1, ks=(1, 3))
    values.update(changes)
    return BilevelConfig(**values)


def snapshot(tensors):
    return [t.detach().clone() for t in tensors]


class TestEveryMethod:
    @pytest.mark.parametrize("method", list(Method))
    def test_runs_and_traces(self, instance, method):
        ds, splits, truth = instance
        result = train_method(method, ds, splits, small_config(), truth)

        assert result.method == method
        assert [r.epoch for r in result.trace.records] == [1, 2]
        assert all(np.isfinite(r.train_loss) for r in result.trace.records)
        assert result.model.is_finite()
        assert (result.exposure is not None) == method.learns_exposure
        assert set(result.trace.records[-1].metrics) == {"dcg@1", "map@1", "dcg@3", "map@3"}
        assert result.trace.records[-1].val_loss is not None

    @pytest.mark.parametrize("method", list(Method))
    def test_zero_epochs_keep_initialisation(self, instance, method):
        ds, splits, truth = instance
        config = small_config(epochs=0)
        result = train_method(method, ds, splits, config, truth)

        initial = init_model(ds.n_users, ds.n_items, config.dim, config.seed, config.init_scale)
        assert torch.equal(result.model.user_emb, initial.user_emb)
        assert torch.equal(result.model.item_emb, initial.item_emb)
        assert result.trace.records == []

    @pytest.mark.parametrize("method", [Method.UBO, Method.RELMF, Method.ALTEROPT])
    def test_fixed_seed_is_bit_identical(self, instance, method):
        ds, splits, truth = instance
        first = train_method(method, ds, splits, small_config(), truth)
        second = train_method(method, ds, splits, small_config(), truth)

        assert torch.equal(first.model.user_emb, second.model.user_emb)
        assert torch.equal(first.model.item_emb, second.model.item_emb)
        assert first.trace.to_jsonl() == second.trace.to_jsonl()

    def test_seed_changes_the_run(self, instance):
        ds, splits, truth = instance
        a = train_method(Method.NAIVE, ds, splits, small_config(seed=1), truth)
        b = train_method(Method.NAIVE, ds, splits, small_config(seed=2), truth)
        assert not torch.equal(a.model.user_emb, b.model.user_emb)

    def test_registry_covers_every_method(self):
        assert set(TRAINERS) == set(Method)


class TestExposureSources:
    def test_sources_per_method(self, instance):
        _, splits, _ = instance
        config = small_config()
        assert isinstance(TRAINERS[Method.NAIVE](splits, config).source, UnitExposure)
        assert isinstance(TRAINERS[Method.RELMF](splits, config).source, PopularityExposure)
        assert isinstance(TRAINERS[Method.UMF](splits, config).source, PopularityExposure)
        for method in (Method.UBO, Method.JOINTOPT, Method.ALTEROPT, Method.BIOPT2):
            assert isinstance(TRAINERS[method](splits, config).source, LearnedExposure)

    @pytest.mark.parametrize("method", [Method.RELMF, Method.UMF])
    def test_popularity_exposure_is_floored(self, instance, method):
        _, splits, _ = instance
        trainer = TRAINERS[method](splits, small_config(clip_floor=0.05))
        assert trainer.source.matrix(trainer.model).min() >= 0.05

    def test_pcc_trace_for_learned_exposure(self, instance):
        ds, splits, truth = instance
        result = train_method(Method.UBO, ds, splits, small_config(pcc_every=2), truth)
        record = result.trace.records[0]
        assert record.mean_pcc is not None and -1.0 <= record.mean_pcc <= 1.0
        assert record.pcc_by_step
        assert all(step % 2 == 0 for step, _ in record.pcc_by_step)

    def test_popularity_methods_report_pcc_without_step_trace(self, instance):
        ds, splits, truth = instance
        record = train_method(Method.RELMF, ds, splits, small_config(), truth).trace.records[0]
        assert record.mean_pcc is not None
        assert record.pcc_by_step == []

    def test_naive_reports_no_pcc(self, instance):
        ds, splits, truth = instance
        record = train_method(Method.NAIVE, ds, splits, small_config(), truth).trace.records[0]
        assert record.mean_pcc is None


class TestUpdateSchedules:
    def test_alternating_first_step_moves_relevance_only(self, instance):
        _, splits, _ = instance
        config = small_config(epochs=1, batch_size=len(splits.train))
        trainer = AlterOptTrainer(splits, config)
        model_before = snapshot(trainer.model.parameters())
        exposure_before = snapshot(trainer.source.parameters())

        trainer.fit()

        assert trainer.global_step == 1
        assert not torch.equal(model_before[0], trainer.model.user_emb)
        assert all(torch.equal(b, a) for b, a in zip(exposure_before, trainer.source.parameters()))

    def test_alternating_second_step_moves_exposure_only(self, instance):
        _, splits, _ = instance
        trainer = AlterOptTrainer(splits, small_config(epochs=1, batch_size=len(splits.train)))
        trainer.fit()
        model_mid = snapshot(trainer.model.parameters())
        exposure_mid = snapshot(trainer.source.parameters())

        trainer.fit()

        assert trainer.global_step == 2
        assert all(torch.equal(b, a) for b, a in zip(model_mid, trainer.model.parameters()))
        assert not torch.equal(exposure_mid[0], trainer.source.parameters()[0])

    def test_joint_step_moves_both(self, instance):
        _, splits, _ = instance
        trainer = JointOptTrainer(splits, small_config(epochs=1, batch_size=len(splits.train)))
        model_before = snapshot(trainer.model.parameters())
        exposure_before = snapshot(trainer.source.parameters())

        trainer.fit()

        assert not torch.equal(model_before[0], trainer.model.user_emb)
        assert not torch.equal(exposure_before[0], trainer.source.parameters()[0])

    def test_zero_outer_rate_keeps_exposure_parameters(self, instance):
        ds, splits, truth = instance
        config = small_config(outer_lr=0.0)
        result = train_method(Method.UBO, ds, splits, config, truth)

        initial = init_exposure(ds.n_users, config.dim, config.seed, config.init_scale)
        assert all(torch.equal(a, b) for a, b in zip(initial.parameters(), result.exposure.parameters()))
        assert not torch.equal(result.model.user_emb, init_model(ds.n_users, ds.n_items, config.dim, config.seed,
                                                                 config.init_scale).user_emb)

    def test_sgd_optimizer(self, instance):
        ds, splits, truth = instance
        result = train_method(Method.UBO, ds, splits, small_config(optimizer=OptimizerKind.SGD), truth)
        assert result.model.is_finite()


class TestTrainerErrors:
    def test_ubo_needs_unbiased_validation(self, instance):
        ds, splits, _ = instance
        bare = splits.replace(unbiased_val=PairSet.empty())
        with pytest.raises(ValueError, match="unbiased validation"):
            train_method(Method.UBO, ds, bare, small_config())
        assert train_method(Method.BIOPT2, ds, bare, small_config()).model.is_finite()

    def test_ground_truth_shape(self, instance):
        ds, splits, _ = instance
        wrong = SyntheticGroundTruth(gamma=np.ones((2, 2)), m=np.ones((2, 2)))
        with pytest.raises(ValueError, match="shape"):
            train_method(Method.NAIVE, ds, splits, small_config(), wrong)

    def test_divergence_names_the_epoch(self, instance, monkeypatch):
        ds, splits, _ = instance
        monkeypatch.setattr(NaiveTrainer, "step", lambda self, batch: float("nan"))
        with pytest.raises(TrainingDivergedError, match="epoch 1") as exc:
            train_method(Method.NAIVE, ds, splits, small_config())
        assert exc.value.epoch == 1


class TestHooksAndWrappers:
    def test_checkpoint_hook(self, instance):
        ds, splits, truth = instance
        calls = []
        train_method(Method.UBO, ds, splits, small_config(epochs=3, checkpoint_every=2), truth,
                     on_checkpoint=lambda epoch, model, exposure: calls.append((epoch, exposure is not None)))
        assert calls == [(2, True)]

    def test_wrappers(self, instance):
        ds, splits, truth = instance
        config = small_config(epochs=1)
        for train in (train_ubo, train_jointopt, train_alteropt, train_biopt2):
            model, exposure, trace = train(ds, splits, config, truth)
            assert exposure is not None and len(trace.records) == 1
        for train in (train_relmf, train_umf, train_naive):
            model, trace = train(ds, splits, config, truth)
            assert model.is_finite() and len(trace.records) == 1
