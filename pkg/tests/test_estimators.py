import math

import numpy as np
import pytest
import torch

from app.models.containers import PairSet
from app.models.schemas import EstimatorKind
from app.services.estimators import (
    PairBatch,
    PairLossContext,
    batch_loss,
    expected_loss,
    grad_ips_wrt_p,
    grad_naive_wrt_p,
    grad_ubo_wrt_p,
    loss_ips,
    loss_naive,
    loss_ubo,
    objective,
    pair_losses,
    to_batch,
    var_ips,
    var_ubo,
)
from app.services.exposure import (
    LearnedExposure,
    OracleExposure,
    PairwiseExposure,
    PopularityExposure,
    PopularityTable,
    UnitExposure,
    init_exposure,
)
from app.services.model import DTYPE, FactorModel, init_model
from app.services.studies import monte_carlo_variance
from app.utils.helpers import seed_stream


def ctx(feedback, p, m_bar=1.0):
    return PairLossContext(feedback=feedback, p=p, m_bar=m_bar)


class TestPerPairLosses:
    @pytest.mark.parametrize("feedback,p,expected", [(1, 0.5, 0.693147), (0, 0.5, 0.693147), (1, 0.9, 0.105361)])
    def test_naive(self, feedback, p, expected):
        assert loss_naive(ctx(feedback, p)) == pytest.approx(expected, abs=1e-6)

    @pytest.mark.parametrize("feedback,m_bar,p,expected", [
        (1, 0.5, 0.5, 0.693147),
        (0, 0.3, 0.5, 0.693147),
        (1, 0.1, 0.5, 0.693147),
    ])
    def test_ips(self, feedback, m_bar, p, expected):
        assert loss_ips(ctx(feedback, p, m_bar)) == pytest.approx(expected, abs=1e-6)

    def test_ips_matches_scalar_oracle(self):
        expected = -(10 * math.log(0.9) - 9 * math.log(0.1))
        assert loss_ips(ctx(1, 0.9, 0.1)) == pytest.approx(expected, rel=1e-12)

    def test_ips_weight_is_clipped(self):
        clipped = PairLossContext(1, 0.5, 0.001, clip_floor=0.01)
        assert loss_ips(clipped) == pytest.approx(loss_ips(ctx(1, 0.5, 0.01)))

    @pytest.mark.parametrize("feedback,m_bar,p,expected", [
        (1, 1.0, 0.5, 0.693147),
        (0, 0.5, 0.5, 0.287682),
        (1, 0.1, 0.5, 2.995732),
    ])
    def test_ubo(self, feedback, m_bar, p, expected):
        assert loss_ubo(ctx(feedback, p, m_bar)) == pytest.approx(expected, abs=1e-6)

    def test_ubo_with_full_exposure_is_naive(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, 50)
        feedback = rng.integers(0, 2, 50)
        np.testing.assert_allclose(loss_ubo(ctx(feedback, p, 1.0)), loss_naive(ctx(feedback, p)))

    def test_ubo_stays_finite_at_saturation(self):
        assert np.isfinite(loss_ubo(ctx(0, 1 - 1e-16, 1.0)))

    @pytest.mark.parametrize("field,value", [("feedback", 2), ("p", 0.0), ("p", 1.0), ("m_bar", 0.0), ("m_bar", 1.5)])
    def test_context_preconditions(self, field, value):
        values = {"feedback": 1, "p": 0.5, "m_bar": 0.5, field: value}
        with pytest.raises(ValueError):
            PairLossContext(**values)


class TestGradients:
    def test_naive_values(self):
        assert grad_naive_wrt_p(ctx(1, 0.5)) == pytest.approx(-2.0)
        assert grad_naive_wrt_p(ctx(0, 0.5)) == pytest.approx(2.0)

    def test_ips_values(self):
        assert grad_ips_wrt_p(ctx(0, 0.5, 0.3)) == pytest.approx(2.0)
        assert grad_ips_wrt_p(ctx(1, 0.5, 1.0)) == pytest.approx(-2.0)

    def test_ubo_values(self):
        assert grad_ubo_wrt_p(ctx(1, 0.5, 0.2)) == pytest.approx(-2.0)
        assert grad_ubo_wrt_p(ctx(0, 0.5, 0.5)) == pytest.approx(0.666667, abs=1e-6)

    @pytest.mark.parametrize("loss,grad", [(loss_ips, grad_ips_wrt_p), (loss_ubo, grad_ubo_wrt_p),
                                           (loss_naive, grad_naive_wrt_p)])
    def test_matches_central_difference(self, loss, grad):
        rng = np.random.default_rng(7)
        h = 1e-6
        for _ in range(20):
            feedback, p, m_bar = int(rng.integers(0, 2)), rng.uniform(0.05, 0.95), rng.uniform(0.05, 1.0)
            numeric = (loss(ctx(feedback, p + h, m_bar)) - loss(ctx(feedback, p - h, m_bar))) / (2 * h)
            assert grad(ctx(feedback, p, m_bar)) == pytest.approx(numeric, rel=1e-6, abs=1e-8)


class TestVarianceClosedForms:
    def test_reference_values(self):
        assert var_ips(0.5, 0.1, 0.5) == pytest.approx(76.0)
        assert var_ips(0.5, 1.0, 0.5) == pytest.approx(4.0)
        assert var_ubo(0.5, 0.1, 0.5) == pytest.approx(0.210526, abs=1e-6)
        assert var_ubo(0.5, 1.0, 0.5) == pytest.approx(4.0)

    def test_limits_as_exposure_vanishes(self):
        m_bars = np.array([1.0, 0.5, 0.1, 0.01, 1e-4])
        ips = var_ips(0.5, m_bars, 0.5)
        ubo = var_ubo(0.5, m_bars, 0.5)
        assert (np.diff(ips) > 0).all()
        assert ubo[-1] < 1e-3

    @pytest.mark.parametrize("kind,closed", [(EstimatorKind.IPS, var_ips), (EstimatorKind.UBO, var_ubo)])
    @pytest.mark.parametrize("m_bar", [0.1, 1.0])
    def test_monte_carlo_agrees(self, kind, closed, m_bar):
        rng = seed_stream(0, "variance")
        empirical = monte_carlo_variance(kind, 0.5, m_bar, 0.5, 1_000_000, rng, clip_floor=0.1)
        assert empirical == pytest.approx(closed(0.5, m_bar, 0.5), rel=0.02)

    def test_ubo_never_exceeds_ips(self):
        gamma, m_bar, p = np.meshgrid([0.2, 0.5, 0.8], [0.01, 0.1, 0.5, 0.9], [0.3, 0.5, 0.7])
        assert (var_ubo(gamma, m_bar, p) < var_ips(gamma, m_bar, p)).all()
        np.testing.assert_allclose(var_ubo(0.3, 1.0, 0.6), var_ips(0.3, 1.0, 0.6), rtol=1e-15)


class TestExpectedLoss:
    def test_unbiased_when_exposure_is_known(self):
        # expected IPS loss equals the cross entropy against the true relevance
        gamma, m, p = 0.4, 0.3, 0.6
        truth = gamma * -math.log(p) + (1 - gamma) * -math.log(1 - p)
        assert expected_loss(EstimatorKind.IPS, gamma, m, p) == pytest.approx(truth)
        assert expected_loss(EstimatorKind.NAIVE, gamma, 1.0, p) == pytest.approx(truth)


class TestPairLosses:
    def test_agrees_with_probability_space_losses(self):
        logits = torch.tensor([-2.0, 0.0, 0.3, 1.5], dtype=DTYPE)
        labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=DTYPE)
        m_bar = torch.tensor([0.2, 0.5, 0.9, 0.05], dtype=DTYPE)
        p = torch.sigmoid(logits).numpy()
        for kind, loss in [(EstimatorKind.NAIVE, loss_naive), (EstimatorKind.IPS, loss_ips),
                           (EstimatorKind.UBO, loss_ubo)]:
            expected = loss(PairLossContext(labels.numpy().astype(int), p, m_bar.numpy()))
            np.testing.assert_allclose(pair_losses(kind, labels, logits, m_bar).numpy(), expected, rtol=1e-10)

    def test_saturated_logits_stay_finite(self):
        logits = torch.tensor([60.0, -60.0, 800.0], dtype=DTYPE)
        labels = torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE)
        m_bar = torch.tensor([1.0, 0.5, 0.999], dtype=DTYPE)
        for kind in EstimatorKind:
            assert torch.isfinite(pair_losses(kind, labels, logits, m_bar)).all()


class TestBatchLoss:
    @pytest.fixture
    def model(self):
        return init_model(6, 7, dim=3, seed=1, scale=0.5)

    def test_single_pair_equals_per_pair_loss(self, model):
        pairs = PairSet(np.array([2]), np.array([3]), np.array([0]))
        theta = PopularityTable(np.linspace(0.1, 1.0, 7))
        p = float(torch.sigmoid(model.user_emb[2] @ model.item_emb[3]))

        result = batch_loss(pairs, model, PopularityExposure(theta), EstimatorKind.UBO)

        assert result.loss == pytest.approx(float(loss_ubo(ctx(0, p, theta.theta[3]))), rel=1e-10)

    def test_two_pairs_average(self, model):
        pairs = PairSet(np.array([0, 1]), np.array([0, 1]), np.array([1, 0]))
        single = [batch_loss(pairs.take(np.array([j])), model, UnitExposure(), EstimatorKind.NAIVE).loss
                  for j in range(2)]
        both = batch_loss(pairs, model, UnitExposure(), EstimatorKind.NAIVE).loss
        assert both == pytest.approx(np.mean(single))

    def test_unseen_item_is_pushed_down_once_floored(self, model):
        theta = PopularityTable(np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
        pairs = PairSet(np.array([0]), np.array([1]), np.array([0]))

        raw = batch_loss(pairs, model, PopularityExposure(theta), EstimatorKind.UBO)
        floored = batch_loss(pairs, model, PopularityExposure(theta, floor=0.01), EstimatorKind.UBO)

        assert raw.loss == pytest.approx(0.0, abs=1e-12)
        assert float(raw.grads["user_emb"].abs().max()) < 1e-12
        assert floored.loss > 0.0
        assert float(floored.grads["user_emb"][0].abs().max()) > 0.0

    def test_empty_pair_set(self, model):
        with pytest.raises(ValueError, match="empty"):
            batch_loss(PairSet.empty(), model, UnitExposure(), EstimatorKind.NAIVE)

    def test_gradients_are_named_and_shaped(self, model):
        source = LearnedExposure(init_exposure(6, 3, seed=1), PopularityTable(np.full(7, 0.5)))
        pairs = PairSet(np.array([0, 5]), np.array([6, 2]), np.array([1, 0]))
        grads = batch_loss(pairs, model, source, EstimatorKind.UBO).grads
        assert list(grads) == ["user_emb", "item_emb", "user_exp_emb", "gate_weight", "gate_bias"]
        assert grads["user_emb"].shape == (6, 3)
        assert grads["gate_bias"].shape == ()

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        n_users, n_items = 40, 30
        model = init_model(n_users, n_items, dim=4, seed=2, scale=0.5)
        source = LearnedExposure(init_exposure(n_users, 4, seed=2, scale=0.5),
                                 PopularityTable(rng.uniform(0.05, 1.0, n_items)))
        cells = rng.choice(n_users * n_items, size=1000, replace=False)
        pairs = PairSet(cells // n_items, cells % n_items, (rng.random(1000) < 0.3).astype(np.int8))
        batch = to_batch(pairs)

        grads = batch_loss(batch, model, source, EstimatorKind.UBO).grads
        for name, param in [("user_emb", model.user_emb), ("item_emb", model.item_emb),
                            ("user_exp_emb", source.params.user_exp_emb)]:
            for flat_index in rng.choice(param.numel(), size=4, replace=False):
                flat = param.detach().view(-1)
                h = 1e-6
                original = float(flat[flat_index])

                def value():
                    with torch.no_grad():
                        return float(objective(model, source, batch, EstimatorKind.UBO))

                with torch.no_grad():
                    flat[flat_index] = original + h
                upper = value()
                with torch.no_grad():
                    flat[flat_index] = original - h
                lower = value()
                with torch.no_grad():
                    flat[flat_index] = original

                numeric = (upper - lower) / (2 * h)
                analytic = float(grads[name].reshape(-1)[flat_index])
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-9)

    def test_positive_pairs_carry_no_exposure_gradient_through_relevance(self):
        model = FactorModel(torch.tensor([[0.3, -0.2]], dtype=DTYPE, requires_grad=True),
                            torch.tensor([[0.5, 0.1]], dtype=DTYPE, requires_grad=True))
        batch = PairBatch(torch.tensor([0]), torch.tensor([0]), torch.ones(1, dtype=DTYPE))
        source = PairwiseExposure([0.4])
        loss = objective(model, source, batch, EstimatorKind.UBO)
        (grad_user,) = torch.autograd.grad(loss, [model.user_emb], create_graph=True)
        (mixed,) = torch.autograd.grad(grad_user.sum(), source.parameters(), allow_unused=True)
        assert mixed is None or float(mixed.abs().max()) == 0.0


class TestOracleBatchGradient:
    """Averaged over the feedback draw, the true exposure leaves no gradient at p = gamma."""

    gamma, m = 0.6, 0.3

    @pytest.fixture
    def model(self):
        logit = math.log(self.gamma / (1 - self.gamma))
        return FactorModel(torch.tensor([[logit]], dtype=DTYPE, requires_grad=True),
                           torch.tensor([[1.0]], dtype=DTYPE, requires_grad=True))

    def expected_grad(self, model, source, kind):
        rate = self.m * self.gamma
        hit = batch_loss(PairSet(np.array([0]), np.array([0]), np.array([1])), model, source, kind)
        miss = batch_loss(PairSet(np.array([0]), np.array([0]), np.array([0])), model, source, kind)
        return float(rate * hit.grads["user_emb"] + (1 - rate) * miss.grads["user_emb"])

    @pytest.mark.parametrize("kind", [EstimatorKind.IPS, EstimatorKind.UBO])
    def test_debiased_losses_are_stationary(self, model, kind):
        oracle = OracleExposure(np.array([[self.m]]))
        assert self.expected_grad(model, oracle, kind) == pytest.approx(0.0, abs=1e-12)

    def test_naive_loss_is_not(self, model):
        assert self.expected_grad(model, UnitExposure(), EstimatorKind.NAIVE) > 0.1
