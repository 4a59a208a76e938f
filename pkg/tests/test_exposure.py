import math

import numpy as np
import pytest
import torch

from app.models.containers import PairSet
from app.services.exposure import (
    ExposureParams,
    LearnedExposure,
    OracleExposure,
    PairwiseExposure,
    PopularityExposure,
    PopularityTable,
    UnitExposure,
    estimate_exposure,
    exposure_matrix,
    compute_popularity,
    gate,
    init_exposure,
    learned_exposure,
    popularity_from_counts,
    popularity_from_pairs,
)
from app.services.model import DTYPE, FactorModel, init_model
from app.services.ratings import dataset_from_matrix
from app.services.studies import finite_difference, relative_error


def params_with(user_rows, weight, bias) -> ExposureParams:
    return ExposureParams(
        user_exp_emb=torch.tensor(user_rows, dtype=DTYPE),
        gate_weight=torch.tensor(weight, dtype=DTYPE),
        gate_bias=torch.tensor(bias, dtype=DTYPE),
    )


class TestPopularity:
    def test_from_dataset_counts_positives_only(self):
        feedback = np.array([[1, 1, 0], [1, 0, 0], [1, 1, 0], [1, 0, 0]])
        table = compute_popularity(dataset_from_matrix(feedback))
        np.testing.assert_allclose(table.theta, [1.0, math.sqrt(0.5), 0.0])

    @pytest.mark.parametrize("counts,expected", [
        ([4, 1], [1.0, 0.5]),
        ([9, 9], [1.0, 1.0]),
        ([16, 4, 0], [1.0, 0.5, 0.0]),
    ])
    def test_square_root_normalised_counts(self, counts, expected):
        np.testing.assert_allclose(popularity_from_counts(np.array(counts)).theta, expected)

    def test_all_zero_counts(self):
        with pytest.raises(ValueError, match="positive interaction"):
            popularity_from_counts(np.zeros(3))

    def test_from_pairs_counts_positive_labels_only(self):
        pairs = PairSet(np.array([0, 1, 2, 0]), np.array([0, 0, 1, 2]), np.array([1, 1, 1, 0]))
        np.testing.assert_allclose(popularity_from_pairs(pairs, 3).theta, [1.0, math.sqrt(0.5), 0.0])

    def test_table_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            PopularityTable(np.array([0.5, 1.5]))

    def test_clipped(self):
        np.testing.assert_allclose(PopularityTable(np.array([0.0, 0.5])).clipped(0.01), [0.01, 0.5])


class TestGate:
    def test_zero_weight_zero_bias(self):
        assert gate(params_with([[0.0, 0.0]], [0.0, 0.0], 0.0), [0.3, -2.0]) == pytest.approx(0.5)

    def test_bias_log_three(self):
        assert gate(params_with([[0.0, 0.0]], [0.0, 0.0], math.log(3.0)), [1.0, 1.0]) == pytest.approx(0.75)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        weight, item, bias = rng.normal(size=4), rng.normal(size=4), float(rng.normal())
        expected = 1.0 / (1.0 + math.exp(-(sum(w * x for w, x in zip(weight, item)) + bias)))
        assert gate(params_with(np.zeros((1, 4)), weight, bias), item) == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            gate(params_with([[0.0, 0.0]], [0.0, 0.0], 0.0), [1.0, 2.0, 3.0])


class TestEstimateExposure:
    @staticmethod
    def setup(user_term_logit: float, bias: float, theta: float):
        # e_u . w_i = user_term_logit, gate = sigmoid(bias)
        model = FactorModel(torch.zeros(1, 1, dtype=DTYPE), torch.tensor([[1.0]], dtype=DTYPE))
        params = params_with([[user_term_logit]], [0.0], bias)
        return params, model, PopularityTable(np.array([theta]))

    def test_closed_gate_returns_popularity(self):
        params, model, theta = self.setup(2.0, -1000.0, 0.3)
        assert estimate_exposure(params, model, theta, 0, 0) == pytest.approx(0.3)

    def test_open_gate_returns_user_term(self):
        params, model, theta = self.setup(2.0, 1000.0, 0.3)
        assert estimate_exposure(params, model, theta, 0, 0) == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))

    def test_half_gate_mixes(self):
        logit_06 = math.log(0.6 / 0.4)
        params, model, theta = self.setup(logit_06, 0.0, 0.2)
        assert estimate_exposure(params, model, theta, 0, 0) == pytest.approx(0.4)

    def test_matrix_matches_pairwise_estimates(self):
        model = init_model(4, 5, dim=3, seed=2, scale=0.8)
        params = init_exposure(4, 3, seed=2, scale=0.8)
        with torch.no_grad():
            params.gate_weight.copy_(torch.tensor([0.5, -0.3, 0.2], dtype=DTYPE))
        theta = PopularityTable(np.linspace(0.1, 1.0, 5))

        dense = exposure_matrix(params, model, theta)

        assert dense.shape == (4, 5)
        assert ((dense > 0) & (dense < 1)).all()
        for u in range(4):
            for i in range(5):
                assert dense[u, i] == pytest.approx(estimate_exposure(params, model, theta, u, i), rel=1e-12)
        np.testing.assert_allclose(LearnedExposure(params, theta).matrix(model), dense)

    @pytest.mark.parametrize("seed", range(5))
    def test_lies_between_user_term_and_popularity(self, seed):
        rng = np.random.default_rng(seed)
        model = init_model(6, 9, dim=3, seed=seed, scale=1.0)
        params = params_with(rng.normal(size=(6, 3)), rng.normal(size=3), float(rng.normal()))
        theta = PopularityTable(rng.uniform(0.0, 1.0, 9))

        dense = exposure_matrix(params, model, theta)

        with torch.no_grad():
            user_term = torch.sigmoid(params.user_exp_emb @ model.item_emb.T).numpy()
        low = np.minimum(user_term, theta.theta)
        high = np.maximum(user_term, theta.theta)
        assert (dense >= low - 1e-12).all() and (dense <= high + 1e-12).all()


class TestExposurePartials:
    @pytest.mark.parametrize("seed", range(3))
    def test_match_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = ExposureParams(
            user_exp_emb=torch.tensor(rng.normal(size=(4, 3)), dtype=DTYPE, requires_grad=True),
            gate_weight=torch.tensor(rng.normal(size=3), dtype=DTYPE, requires_grad=True),
            gate_bias=torch.tensor(float(rng.normal()), dtype=DTYPE, requires_grad=True),
        )
        item_emb = torch.tensor(rng.normal(size=(5, 3)), dtype=DTYPE, requires_grad=True)
        theta = torch.tensor(rng.uniform(0.05, 1.0, 5), dtype=DTYPE)
        users = torch.tensor([0, 1, 2, 3, 0, 2])
        items = torch.tensor([4, 0, 1, 1, 3, 2])
        tensors = params.parameters() + [item_emb]

        total = learned_exposure(params, theta, users, items, item_emb).sum()
        analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(total, tensors)]).numpy()
        numeric = finite_difference(
            lambda: float(learned_exposure(params, theta, users, items, item_emb).sum()), tensors, step=1e-5,
        )

        assert relative_error(analytic, numeric) <= 1e-5

    def test_initial_gate_is_one_half(self):
        params = init_exposure(3, 4, seed=0)
        assert gate(params, torch.ones(4)) == pytest.approx(0.5)


class TestExposureSources:
    def test_fixed_sources(self):
        model = init_model(2, 3, dim=2)
        theta = PopularityTable(np.array([1.0, 0.5, 0.25]))
        m = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])

        np.testing.assert_allclose(PopularityExposure(theta).matrix(model), np.tile(theta.theta, (2, 1)))
        np.testing.assert_allclose(OracleExposure(m).matrix(model), m)
        np.testing.assert_allclose(UnitExposure().matrix(model), np.ones((2, 3)))
        assert PopularityExposure(theta).parameters() == []

    def test_learned_source_exposes_its_parameters(self):
        source = LearnedExposure(init_exposure(3, 2), PopularityTable(np.ones(4)))
        assert len(source.parameters()) == 3
        assert source.parameter_names() == ["user_exp_emb", "gate_weight", "gate_bias"]

    def test_pairwise_source_checks_batch_length(self):
        source = PairwiseExposure([0.5, 0.2])
        with pytest.raises(ValueError, match="does not match"):
            source.m_bar(torch.tensor([0]), torch.tensor([0]), torch.zeros(1, 1, dtype=DTYPE))
        assert source.parameters()[0].requires_grad
