import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from censelect.cox import (_Sorted, coefficient_test, fit_cox, partial_likelihood,
                           predict_survival, robust_variance, score_test,
                           standardized_curves, wald_test)
from censelect.errors import (ConvergenceError, DataError, SeparationError,
                              SingularInformationError)
from censelect.simulation import DgpConfig, simulate, true_survival
from censelect.survival import Dataset, kaplan_meier, logrank_test

from conftest import random_dataset

EIGHT_ROWS = Dataset(
    time=[0.8, 1.3, 2.1, 2.9, 3.4, 4.2, 5.5, 6.1],
    status=[1, 1, 0, 1, 1, 1, 0, 1],
    treatment=[0, 1, 0, 1, 0, 1, 0, 1],
    covariates=[[1], [0], [1], [1], [0], [0], [1], [0]],
)


def _loglik_loop(time, status, x, beta):
    """Breslow log partial likelihood for one covariate, written out by rows."""
    total = 0.0
    for i in range(len(time)):
        if status[i]:
            denom = sum(math.exp(beta * x[j]) for j in range(len(time)) if time[j] >= time[i])
            total += beta * x[i] - math.log(denom)
    return total


def test_grid_search_oracle():
    fit = fit_cox(EIGHT_ROWS, ["X1"], include_treatment=False)
    x = EIGHT_ROWS.covariates[:, 0]
    grid = np.arange(-50000, 50001) * 1e-4
    # vectorised version of _loglik_loop over the grid
    risk = EIGHT_ROWS.time[None, :] >= EIGHT_ROWS.time[:, None]
    ev = EIGHT_ROWS.status == 1
    denom = np.exp(np.outer(grid, x)) @ risk[ev].T
    ll = grid * x[ev].sum() - np.log(denom).sum(axis=1)
    best = grid[np.argmax(ll)]
    assert abs(fit.coefficients[0] - best) < 2e-4
    assert fit.loglik == pytest.approx(_loglik_loop(EIGHT_ROWS.time, EIGHT_ROWS.status, x,
                                                    fit.coefficients[0]), rel=1e-12)
    # frozen from this oracle
    assert fit.coefficients[0] == pytest.approx(0.0764, abs=2e-4)


def test_eight_row_wald_arithmetic():
    fit = fit_cox(EIGHT_ROWS, ["X1"])
    result = wald_test(fit)
    se = math.sqrt(fit.robust_variance[0, 0])
    z = fit.coefficients[0] / se
    assert result.statistic == pytest.approx(z, rel=1e-12)
    assert result.p_value == pytest.approx(math.erfc(abs(z) / math.sqrt(2)), rel=1e-10)
    assert result.adjustment_set == ("X1",)
    assert result.method == "wald_robust"


def test_null_model_is_nelson_aalen():
    data = Dataset([1, 2, 2, 3, 4], [1, 1, 0, 1, 0], [0, 1, 0, 1, 0], np.ones((5, 2)))
    fit = fit_cox(data, (), include_treatment=False)
    assert fit.coefficients.size == 0
    np.testing.assert_allclose(fit.baseline_cumhaz.values, [1 / 5, 1 / 5 + 1 / 4, 1 / 5 + 1 / 4 + 1 / 2])
    np.testing.assert_array_equal(fit.baseline_cumhaz.knots, [1, 2, 3])


def test_zero_treatment_coefficient_gives_p_one():
    data = Dataset([1, 1, 2, 2], [1, 1, 1, 1], [0, 1, 0, 1], np.zeros((4, 0)))
    result = wald_test(fit_cox(data))
    assert result.statistic == 0.0
    assert result.p_value == 1.0


def test_errors():
    data = Dataset([1, 2, 3], [0, 0, 0], [0, 1, 0], np.zeros((3, 1)))
    with pytest.raises(DataError, match="no events"):
        fit_cox(data)
    with pytest.raises(DataError, match="unknown"):
        fit_cox(EIGHT_ROWS, ["X9"])
    collinear = Dataset(EIGHT_ROWS.time, EIGHT_ROWS.status, EIGHT_ROWS.treatment,
                        np.column_stack([EIGHT_ROWS.covariates[:, 0]] * 2))
    with pytest.raises(SingularInformationError, match="singular information"):
        fit_cox(collinear, ["X1", "X2"])
    separated = Dataset([1, 2, 3, 4, 5, 6], [1] * 6, [1, 1, 1, 0, 0, 0], np.zeros((6, 0)))
    with pytest.raises(SeparationError, match="separation"):
        fit_cox(separated)
    with pytest.raises(ConvergenceError) as info:
        fit_cox(EIGHT_ROWS, ["X1"], max_iter=1)
    assert info.value.iterate is not None


def test_treatment_coefficient_consistent_at_large_n():
    data = simulate(DgpConfig(n=10_000, b=0.8, g=0.8, gamma1=1.0, seed=11))
    fit = fit_cox(data, [f"X{j}" for j in range(1, 11)])
    assert abs(fit.treatment_coef) < 3 * math.sqrt(fit.robust_variance[0, 0])


def test_robust_variance_calibration():
    estimates, robust, model = [], [], []
    for r in range(200):
        data = simulate(DgpConfig(n=2000, setting="single_covariate", beta_single=0.7,
                                  gamma2_single=0.5, gamma1=0.5, seed=1000 + r))
        fit = fit_cox(data, ["X1"])
        estimates.append(fit.treatment_coef)
        robust.append(fit.robust_variance[0, 0])
        model.append(fit.model_variance[0, 0])
    ratio = np.mean(robust) / np.var(estimates, ddof=1)
    assert 0.8 <= ratio <= 1.2
    assert abs(np.mean(robust) / np.mean(model) - 1) < 0.25


def test_duplicated_rows_halve_sandwich(rng):
    data = random_dataset(rng, 40, 2)
    doubled = data.subset(np.repeat(np.arange(data.n), 2))
    v1 = fit_cox(data, ["X1", "X2"]).robust_variance
    fit2 = fit_cox(doubled, ["X1", "X2"])
    np.testing.assert_allclose(fit2.robust_variance, v1 / 2, rtol=1e-8)
    np.testing.assert_allclose(robust_variance(fit2, doubled), v1 / 2, rtol=1e-8)


def test_score_test_reproduces_logrank(rng):
    for _ in range(10):
        data = random_dataset(rng, 30, 1)
        lr = logrank_test(data, variance="model")
        sc = score_test(data)
        assert sc.score == pytest.approx(lr.score, rel=1e-10)
        assert sc.statistic == pytest.approx(lr.statistic, rel=1e-10)


def test_score_test_adjusted_is_zero_mean_under_refit(rng):
    data = random_dataset(rng, 60, 2)
    result = score_test(data, ["X1"])
    assert result.method == "score"
    assert result.adjustment_set == ("X1",)
    assert result.variance > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_logrank_score_equals_cox_score(seed):
    data = random_dataset(np.random.default_rng(seed), 25, 0, ties=True)
    if data.treatment.min() == data.treatment.max():
        return
    s = _Sorted(data, data.design((), True))
    _, grad = partial_likelihood(s, np.zeros(1), order=1)
    assert grad[0] == pytest.approx(logrank_test(data).score, rel=1e-10, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 20, 3, ties=bool(seed % 2))
    s = _Sorted(data, data.design(data.covariate_names, True))
    h = 1e-5
    for _ in range(10):
        beta = rng.normal(scale=0.5, size=4)
        _, grad, hess = partial_likelihood(s, beta)
        num_grad = np.empty(4)
        num_hess = np.empty((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            lp, gp = partial_likelihood(s, beta + e, order=1)
            lm, gm = partial_likelihood(s, beta - e, order=1)
            num_grad[j] = (lp - lm) / (2 * h)
            num_hess[:, j] = (gp - gm) / (2 * h)
        scale = max(1.0, np.max(np.abs(grad)))
        assert np.max(np.abs(num_grad - grad)) / scale < 1e-5
        assert np.max(np.abs(num_hess - hess)) / max(1.0, np.max(np.abs(hess))) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_reaches_stationary_point(seed):
    data = random_dataset(np.random.default_rng(seed), 50, 3)
    fit = fit_cox(data, data.covariate_names)
    s = _Sorted(data, data.design(data.covariate_names, True))
    _, grad = partial_likelihood(s, fit.coefficients, order=1)
    assert np.max(np.abs(grad)) <= 1e-8
    np.testing.assert_array_equal(fit.model_information, fit.model_information.T)
    np.testing.assert_array_equal(fit.robust_variance, fit.robust_variance.T)
    assert fit.baseline_cumhaz.initial_value == 0
    assert np.all(np.diff(fit.baseline_cumhaz.values) >= 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([-3.0, 0.25, 7.0]))
def test_rescaling_a_covariate(seed, c):
    data = random_dataset(np.random.default_rng(seed), 50, 2)
    scaled = Dataset(data.time, data.status, data.treatment,
                     data.covariates * np.array([c, 1.0]))
    a = fit_cox(data, ["X1", "X2"])
    b = fit_cox(scaled, ["X1", "X2"])
    assert b.coefficients[1] == pytest.approx(a.coefficients[1] / c, rel=1e-8, abs=1e-10)
    assert b.loglik == pytest.approx(a.loglik, rel=1e-10)
    assert wald_test(b).p_value == pytest.approx(wald_test(a).p_value, rel=1e-8, abs=1e-12)
    times = np.linspace(0, 3, 7)
    np.testing.assert_allclose(predict_survival(b, [c * 0.3, 1.0], 1, times).probabilities,
                               predict_survival(a, [0.3, 1.0], 1, times).probabilities, atol=1e-8)


def test_prediction_shift_invariance(rng):
    data = random_dataset(rng, 80, 2)
    shifted = Dataset(data.time, data.status, data.treatment, data.covariates + 2.5)
    a = fit_cox(data, ["X1", "X2"])
    b = fit_cox(shifted, ["X1", "X2"])
    times = np.linspace(0, 4, 9)
    pa = predict_survival(a, [0.1, -0.2], 0, times).probabilities
    pb = predict_survival(b, [2.6, 2.3], 0, times).probabilities
    np.testing.assert_allclose(pa, pb, atol=1e-8)


def test_predict_basics(rng):
    data = random_dataset(rng, 50, 1)
    fit = fit_cox(data, ["X1"])
    assert predict_survival(fit, [3.0], 1, [0.0]).probabilities[0] == 1.0
    null = fit_cox(data, (), include_treatment=False)
    curve = predict_survival(null, [], 0, np.linspace(0, 5, 50))
    np.testing.assert_allclose(curve.probabilities, np.exp(-null.baseline_cumhaz(curve.times)))
    assert np.all(np.diff(curve.probabilities) <= 0)
    with pytest.raises(ValueError):
        predict_survival(fit, [0.0], 1, [-1.0])
    with pytest.raises(DataError):
        predict_survival(fit, [0.0, 1.0], 1, [1.0])


def test_standardized_curve_without_covariates(rng):
    data = random_dataset(rng, 60, 2)
    fit = fit_cox(data)
    times = np.linspace(0, 3, 10)
    np.testing.assert_allclose(standardized_curves(fit, data, 1, times).probabilities,
                               predict_survival(fit, [], 1, times).probabilities, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_standardized_curves_order_invariant_and_monotone(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 40, 2)
    fit = fit_cox(data, ["X1", "X2"])
    times = np.linspace(0, 4, 15)
    a = standardized_curves(fit, data, 1, times).probabilities
    b = standardized_curves(fit, data.subset(rng.permutation(data.n)), 1, times).probabilities
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))
    assert np.all(np.diff(a) <= 0)


def test_standardization_recovers_truth_where_km_fails():
    config = DgpConfig(n=20_000, b=0.8, g=1.6, gamma1=2.0, seed=5)
    data = simulate(config)
    times = np.arange(13) * 0.5
    truth = true_survival(config, times, draws=1_000_000, seed=1)
    fit = fit_cox(data, [f"X{j}" for j in range(1, 11)])
    for arm in (0, 1):
        curve = standardized_curves(fit, data, arm, times).probabilities
        assert np.max(np.abs(curve - truth)) < 0.02
    km_gap = max(np.max(np.abs(kaplan_meier(data, arm)(times) - truth)) for arm in (0, 1))
    assert km_gap > 0.03


def test_coefficient_test_variances(rng):
    data = random_dataset(rng, 80, 1)
    fit = fit_cox(data, ["X1"])
    robust = coefficient_test(fit, "X1")
    model = coefficient_test(fit, "X1", "model")
    assert robust.variance == pytest.approx(fit.robust_variance[1, 1])
    assert model.variance == pytest.approx(fit.model_variance[1, 1])
