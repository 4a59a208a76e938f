"""Numeric verification studies: gradient variance, unbiasedness and gradient checks."""
import itertools
from pathlib import Path
from typing import Callable, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit

from app.models.schemas import CheckResult, EstimatorKind, SamplingScheme, VarianceRow
from app.services.bilevel import (
    ValGradScenario,
    closed_form_val_grad,
    composed_val_loss,
    free_exposure_grads,
    hypergradient,
    scenario_val_loss,
)
from app.services.estimators import GRADIENTS, PairBatch, PairLossContext, expected_loss, var_ips, var_ubo
from app.services.exposure import ExposureParams, LearnedExposure, PopularityTable
from app.services.model import DTYPE, FactorModel
from app.utils.helpers import seed_stream
from app.utils.validators import ensure, validate_probability

VARIANCE_COLUMNS = list(VarianceRow.model_fields)


def _bernoulli_hits(q: float, n: int, rng: np.random.Generator, sampling: SamplingScheme) -> np.ndarray:
    if sampling == SamplingScheme.STRATIFIED:
        uniforms = (np.arange(n) + rng.random(n)) / n
    else:
        uniforms = rng.random(n)
    return uniforms < q


def monte_carlo_variance(kind: EstimatorKind, gamma: float, m_bar: float, p: float, n_samples: int,
                         rng: np.random.Generator, sampling: SamplingScheme = SamplingScheme.STRATIFIED,
                         clip_floor: float = 0.01) -> float:
    """Sample variance of the per-pair gradient in p under feedback ~ Bernoulli(m_bar * gamma)."""
    hits = _bernoulli_hits(m_bar * gamma, n_samples, rng, sampling)
    grad = GRADIENTS[kind]
    on_hit = grad(PairLossContext(1, p, m_bar, clip_floor))
    on_miss = grad(PairLossContext(0, p, m_bar, clip_floor))
    return float(np.var(np.where(hits, on_hit, on_miss), ddof=1))


def variance_study(gammas: Sequence[float], m_bars: Sequence[float], ps: Sequence[float],
                   n_samples: int = 1_000_000, seed: int = 0,
                   sampling: SamplingScheme = SamplingScheme.STRATIFIED) -> List[VarianceRow]:
    for gamma in gammas:
        ensure(validate_probability(gamma, "gamma"))
    for m_bar in m_bars:
        ensure(validate_probability(m_bar, "m_bar", open_high=False))
    for p in ps:
        ensure(validate_probability(p, "p"))

    rng = seed_stream(seed, "variance")
    # no clipping inside the grid so the closed forms apply unchanged
    clip_floor = min(m_bars)
    rows = []
    for gamma, m_bar, p in itertools.product(gammas, m_bars, ps):
        rows.append(VarianceRow(
            gamma=gamma,
            m_bar=m_bar,
            p=p,
            var_ips_closed=float(var_ips(gamma, m_bar, p)),
            var_ips_mc=monte_carlo_variance(EstimatorKind.IPS, gamma, m_bar, p, n_samples, rng, sampling, clip_floor),
            var_ubo_closed=float(var_ubo(gamma, m_bar, p)),
            var_ubo_mc=monte_carlo_variance(EstimatorKind.UBO, gamma, m_bar, p, n_samples, rng, sampling, clip_floor),
            n_samples=n_samples,
        ))
    logger.info(f"Variance study: {len(rows)} grid points, {n_samples} samples each ({sampling.value})")
    return rows


def write_variance_csv(rows: Iterable[VarianceRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=VARIANCE_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def minimize_expected_loss(kind: EstimatorKind, gamma: float, m: float, p_init: float,
                           clip_floor: float = 0.01) -> float:
    """argmin over p of the expected per-pair loss when the exposure estimate equals the truth."""
    x0 = float(logit(p_init))
    result = minimize_scalar(
        lambda x: float(expected_loss(kind, gamma, m, expit(x), clip_floor=clip_floor)),
        bracket=(x0 - 1.0, x0 + 1.0),
        method="brent",
        options={"xtol": 1e-12},
    )
    return float(expit(result.x))


def unbiasedness_study(gammas: Sequence[float], ms: Sequence[float], p_inits: Sequence[float],
                       kinds: Sequence[EstimatorKind] = (EstimatorKind.IPS, EstimatorKind.UBO),
                       clip_floor: float = 0.01) -> pd.DataFrame:
    rows = []
    for kind, gamma, m, p_init in itertools.product(kinds, gammas, ms, p_inits):
        argmin = minimize_expected_loss(kind, gamma, m, p_init, clip_floor)
        rows.append({
            "estimator": kind.value,
            "gamma": gamma,
            "m": m,
            "p_init": p_init,
            "argmin": argmin,
            "error": abs(argmin - gamma),
        })
    return pd.DataFrame(rows)


def finite_difference(fn: Callable[[], float], params: Sequence[torch.Tensor], step: float) -> np.ndarray:
    """Central differences of `fn` in every entry of `params`, perturbed in place."""
    grads = []
    for param in params:
        flat = param.detach().view(-1)
        for j in range(flat.numel()):
            original = float(flat[j])
            with torch.no_grad():
                flat[j] = original + step
            upper = fn()
            with torch.no_grad():
                flat[j] = original - step
            lower = fn()
            with torch.no_grad():
                flat[j] = original
            grads.append((upper - lower) / (2 * step))
    return np.asarray(grads)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), floor))


def _tensor(values: np.ndarray) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE, requires_grad=True)


def _random_batch(rng: np.random.Generator, n_users: int, n_items: int, size: int,
                  positive_rate: float = 0.5) -> PairBatch:
    cells = rng.choice(n_users * n_items, size=size, replace=False)
    users, items = np.divmod(cells, n_items)
    labels = (rng.random(size) < positive_rate).astype(np.float64)
    return PairBatch(torch.as_tensor(users), torch.as_tensor(items), torch.as_tensor(labels, dtype=DTYPE))


def random_instance(rng: np.random.Generator, n_users: int = 5, n_items: int = 5, dim: int = 3,
                    scale: float = 0.5):
    """Small relevance model plus learned exposure with non-degenerate gate."""
    model = FactorModel(_tensor(rng.normal(0, scale, (n_users, dim))), _tensor(rng.normal(0, scale, (n_items, dim))))
    params = ExposureParams(
        user_exp_emb=_tensor(rng.normal(0, scale, (n_users, dim))),
        gate_weight=_tensor(rng.normal(0, scale, dim)),
        gate_bias=_tensor(rng.normal(0, scale, ())),
    )
    theta = PopularityTable(rng.uniform(0.05, 1.0, n_items))
    return model, LearnedExposure(params, theta)


def random_scenario(rng: np.random.Generator, n_users: int = 5, n_items: int = 5, dim: int = 3,
                    scale: float = 0.5, lr: float = 0.5) -> ValGradScenario:
    user, liking_user, disliking_user = rng.choice(n_users, size=3, replace=False)
    item, liked_item, disliked_item = rng.choice(n_items, size=3, replace=False)
    return ValGradScenario(
        user_emb=rng.normal(0, scale, (n_users, dim)),
        item_emb=rng.normal(0, scale, (n_items, dim)),
        user=int(user),
        item=int(item),
        liked_item=int(liked_item),
        disliked_item=int(disliked_item),
        liking_user=int(liking_user),
        disliking_user=int(disliking_user),
        m_bar=float(rng.uniform(0.1, 0.9)),
        lr=lr,
    )


def sign_scenario(lr: float = 0.5) -> ValGradScenario:
    """Only the liked-item term of the bracket is nonzero, and it is positive."""
    e1, e2, e3 = np.eye(3)
    user_emb = np.stack([e3, e1, e2])
    item_emb = np.stack([e1, e1, e2])
    return ValGradScenario(
        user_emb=user_emb, item_emb=item_emb,
        user=0, item=0, liked_item=1, disliked_item=2, liking_user=1, disliking_user=2,
        m_bar=0.5, lr=lr,
    )


def check_hypergradient(instances: int, tolerance: float, step: float, seed: int = 0,
                        lr: float = 0.5) -> CheckResult:
    rng = seed_stream(seed, "grad-check")
    worst = 0.0
    for _ in range(instances):
        model, exposure = random_instance(rng)
        train_batch = _random_batch(rng, model.n_users, model.n_items, size=12, positive_rate=0.4)
        val_batch = _random_batch(rng, model.n_users, model.n_items, size=6)

        analytic = hypergradient(model, exposure, train_batch, val_batch, lr).flat()
        numeric = finite_difference(
            lambda: composed_val_loss(model, exposure, train_batch, val_batch, lr),
            exposure.parameters(), step,
        )
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(component="hypergradient", passed=worst <= tolerance, max_error=worst,
                       tolerance=tolerance, instances=instances,
                       detail="analytic hypergradient vs central differences over e_u, gate weight and bias")


def check_zero_inner_rate(instances: int, seed: int = 0) -> CheckResult:
    rng = seed_stream(seed, "grad-check")
    worst = 0.0
    for _ in range(instances):
        model, exposure = random_instance(rng)
        train_batch = _random_batch(rng, model.n_users, model.n_items, size=12)
        val_batch = _random_batch(rng, model.n_users, model.n_items, size=6)
        hyper = hypergradient(model, exposure, train_batch, val_batch, lr=0.0)
        worst = max(worst, float(np.abs(hyper.flat()).max()))
    return CheckResult(component="zero-inner-rate", passed=worst == 0.0, max_error=worst, tolerance=0.0,
                       instances=instances, detail="hypergradient with a zero inner learning rate")


def check_positive_free_exposure(instances: int, seed: int = 0, lr: float = 0.5,
                                 tolerance: float = 1e-12) -> CheckResult:
    rng = seed_stream(seed, "grad-check")
    worst = 0.0
    for _ in range(instances):
        model, _ = random_instance(rng)
        train_batch = _random_batch(rng, model.n_users, model.n_items, size=10, positive_rate=1.0)
        val_batch = _random_batch(rng, model.n_users, model.n_items, size=6)
        m_bar = rng.uniform(0.05, 0.95, len(train_batch))
        grads = free_exposure_grads(model, train_batch, val_batch, lr, m_bar)
        worst = max(worst, float(grads.abs().max()))
    return CheckResult(component="positive-free-exposure", passed=worst <= tolerance, max_error=worst,
                       tolerance=tolerance, instances=instances,
                       detail="per-pair exposure gradients for a positive-only train batch")


def check_closed_form(instances: int, tolerance: float, step: float, seed: int = 0) -> CheckResult:
    rng = seed_stream(seed, "grad-check")
    worst = 0.0
    for _ in range(instances):
        scenario = random_scenario(rng)
        analytic = closed_form_val_grad(scenario)
        numeric = (scenario_val_loss(scenario, scenario.m_bar + step)
                   - scenario_val_loss(scenario, scenario.m_bar - step)) / (2 * step)
        worst = max(worst, relative_error([analytic], [numeric]))

    sign = closed_form_val_grad(sign_scenario())
    passed = worst <= tolerance and sign > 0
    return CheckResult(component="closed-form-val-grad", passed=passed, max_error=worst, tolerance=tolerance,
                       instances=instances,
                       detail=f"closed form vs central differences of the unrolled scenario; sign case {sign:.6g}")


def check_unbiasedness(tolerance: float = 1e-4, clip_floor: float = 0.01) -> CheckResult:
    grid = np.linspace(0.1, 0.9, 5)
    study = unbiasedness_study(
        gammas=grid, ms=[0.05, 0.1, 0.3, 0.6, 1.0], p_inits=[0.05, 0.25, 0.5, 0.75, 0.95],
        clip_floor=clip_floor,
    )
    worst = float(study["error"].max())
    return CheckResult(component="unbiasedness", passed=worst <= tolerance, max_error=worst,
                       tolerance=tolerance, instances=len(study),
                       detail="argmin of expected IPS and UBO losses equals the true relevance")


def run_grad_checks(instances: int = 20, tolerance: float = 1e-4, step: float = 1e-5,
                    seed: int = 0) -> List[CheckResult]:
    results = [
        check_hypergradient(instances, tolerance, step, seed),
        check_zero_inner_rate(instances, seed),
        check_positive_free_exposure(instances, seed),
        check_closed_form(instances, tolerance, step, seed),
        check_unbiasedness(),
    ]
    for result in results:
        log = logger.info if result.passed else logger.error
        log(f"{result.component}: {'pass' if result.passed else 'FAIL'} "
            f"(max error {result.max_error:.3g}, tolerance {result.tolerance:.3g})")
    return results
