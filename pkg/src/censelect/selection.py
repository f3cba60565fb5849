"""Select-then-test procedures for the treatment effect.

``post_lasso`` refits on the covariates kept by one lasso of the event
time; ``double_selection`` adds those kept by a lasso of the censoring
time. Both finish with a robust Wald test from an unpenalized refit that
always contains the treatment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .cox import CoxFit, coefficient_test, fit_cox, score_test, wald_test
from .errors import DataError
from .lasso import CvResult, cross_validate, gaussian_cross_validate, select_lambda, selected_support
from .survival import TREATMENT, Dataset, TestResult, censoring_dataset, logrank_test, make_test, time_groups

LAMBDA_RULES = ("min", "1se")


@dataclass(frozen=True, eq=False)
class SelectionReport:
    survival_support: frozenset
    censoring_support: frozenset
    final_adjustment_set: tuple
    lambda_rule: str
    lambda_survival: float
    lambda_censoring: float | None
    test: TestResult
    fit: CoxFit


def _check_rule(rule):
    if rule not in LAMBDA_RULES:
        raise ValueError(f"lambda_rule must be one of {LAMBDA_RULES}, got {rule!r}")


def _ordered(data: Dataset, names: Iterable[str]) -> tuple:
    """Names in dataset column order."""
    chosen = set(names)
    unknown = chosen - set(data.covariate_names)
    if unknown:
        raise DataError(f"unknown covariates: {', '.join(sorted(unknown))}")
    return tuple(name for name in data.covariate_names if name in chosen)


def _lasso_support(data: Dataset, rule: str, folds: int, seed: int, cv: CvResult | None):
    if data.p == 0:
        return frozenset(), None
    cv = cv or cross_validate(data, folds=folds, seed=seed)
    return selected_support(cv.coefficients(rule), cv.path.names), cv.lambda_for(rule)


def _refit(data, survival_support, censoring_support, forced_in, rule, lam_s, lam_c):
    adjustment = _ordered(data, set(survival_support) | set(censoring_support) | set(forced_in))
    fit = fit_cox(data, adjustment, include_treatment=True)
    return SelectionReport(
        survival_support=frozenset(survival_support),
        censoring_support=frozenset(censoring_support),
        final_adjustment_set=adjustment,
        lambda_rule=rule,
        lambda_survival=float("nan") if lam_s is None else lam_s,
        lambda_censoring=lam_c,
        test=wald_test(fit),
        fit=fit,
    )


def post_lasso(data: Dataset, lambda_rule: str = "1se", folds: int = 20, seed: int = 0,
               forced_in: Iterable[str] = (), *, survival_cv: CvResult | None = None
               ) -> SelectionReport:
    """Lasso of the event time, then a robust Wald test after refitting.

    A precomputed ``survival_cv`` (same data, folds and seed) can be passed
    to share work between procedures.
    """
    _check_rule(lambda_rule)
    if data.n_events == 0:
        raise DataError("no events")
    support, lam = _lasso_support(data, lambda_rule, folds, seed, survival_cv)
    return _refit(data, support, frozenset(), forced_in, lambda_rule, lam, None)


def double_selection(data: Dataset, lambda_rule: str = "1se", folds: int = 20, seed: int = 0,
                     forced_in: Iterable[str] = (), *, survival_cv: CvResult | None = None,
                     censoring_cv: CvResult | None = None) -> SelectionReport:
    """Union of event-time and censoring-time lasso supports, then refit.

    Step 1 selects covariates predictive of the event, step 2 those
    predictive of censoring (same fold seed, its own penalty grid); the
    treatment is penalized in both lassos but always kept in the refit.
    Without censored observations the censoring support is empty.
    """
    _check_rule(lambda_rule)
    if data.n_events == 0:
        raise DataError("no events")
    surv_support, lam_s = _lasso_support(data, lambda_rule, folds, seed, survival_cv)
    cens = censoring_dataset(data)
    if cens.n_events == 0:
        cens_support, lam_c = frozenset(), None
    else:
        cens_support, lam_c = _lasso_support(cens, lambda_rule, folds, seed, censoring_cv)
    return _refit(data, surv_support, cens_support, forced_in, lambda_rule, lam_s, lam_c)


def significance_selection_single(data: Dataset, alpha_select: float = 0.025,
                                  variance: str = "model", test: str = "score") -> TestResult:
    """Adjust for the single covariate only when it is significant.

    The covariate's Wald p-value in the model with treatment and covariate
    decides the branch: below ``alpha_select`` the treatment is tested in
    that model, otherwise in the treatment-only model. ``test="score"``
    uses model-based score tests (the unadjusted one is the logrank test);
    ``test="wald"`` uses Wald tests with the chosen ``variance``. The branch
    taken shows in ``adjustment_set`` (the covariate name, or empty).
    """
    if data.p != 1:
        raise DataError("single-covariate procedure needs exactly one covariate")
    if test not in ("score", "wald"):
        raise ValueError("test must be 'score' or 'wald'")
    name = data.covariate_names[0]
    full = fit_cox(data, (name,), include_treatment=True)
    adjust = coefficient_test(full, name, variance).p_value < alpha_select
    adjustment = (name,) if adjust else ()
    if test == "score":
        return score_test(data, adjustment)
    fit = full if adjust else fit_cox(data, (), include_treatment=True)
    return coefficient_test(fit, TREATMENT, variance)


# -- decorrelated score ---------------------------------------------------


def integrated_residuals(data: Dataset, beta: np.ndarray):
    """Per-subject event-time residuals of treatment and covariates.

    For subject i with an event at t_i these are A_i and X_i minus their
    risk-set averages at t_i weighted by exp(beta'X); censored subjects get
    zeros. Returned in the original row order.
    """
    tg = time_groups(data)
    order = tg.order
    x = data.covariates[order]
    a = data.treatment[order].astype(np.float64)
    d = data.status[order].astype(np.float64)
    eta = x @ np.asarray(beta, dtype=np.float64) if data.p else np.zeros(data.n)
    r = np.exp(eta - eta.max())
    s0 = np.cumsum(r[::-1])[::-1][tg.starts]
    abar = (np.cumsum((r * a)[::-1])[::-1][tg.starts] / s0)[tg.inverse]
    xbar = (np.cumsum((r[:, None] * x)[::-1], axis=0)[::-1][tg.starts] / s0[:, None])[tg.inverse]
    a_res = np.empty(data.n)
    x_res = np.empty((data.n, data.p))
    a_res[order] = d * (a - abar)
    x_res[order] = d[:, None] * (x - xbar)
    return a_res, x_res


def decorrelated_score(data: Dataset, beta: np.ndarray, w: np.ndarray):
    """Decorrelated score at a zero treatment effect.

    Returns ``(U, contributions)`` with
    ``U = (1/n) sum_i delta_i [A_i - w'X_i - (Abar(t_i) - w'Xbar(t_i))]``
    and the per-subject summands whose mean is ``U``. Oriented like the
    logrank score: with ``beta = w = 0`` this is the logrank ``U`` over n.
    """
    a_res, x_res = integrated_residuals(data, beta)
    contrib = a_res - x_res @ np.asarray(w, dtype=np.float64)
    return float(contrib.mean()), contrib


def decorrelated_score_test(data: Dataset, lambda_rule: str = "1se", folds: int = 20,
                            seed: int = 0, *, survival_cv: CvResult | None = None
                            ) -> TestResult:
    """Decorrelated score test of no treatment effect.

    The covariate coefficients come from the lasso Cox fit of the event
    time on treatment and covariates. The treatment residuals are then
    regressed on the covariate residuals by cross-validated lasso (no
    intercept) to get the projection ``w``. The statistic is
    ``sqrt(n) U / sd`` with ``sd`` the empirical standard deviation of the
    per-subject contributions to ``U``.
    """
    _check_rule(lambda_rule)
    if data.n_events == 0:
        raise DataError("no events")
    if data.p == 0:
        raise DataError("decorrelated score needs at least one covariate")
    cv = survival_cv or cross_validate(data, folds=folds, seed=seed)
    beta = cv.coefficients(lambda_rule)[1:]
    a_res, x_res = integrated_residuals(data, beta)
    if not np.any(x_res):
        raise DataError("degenerate residual regression: all-zero design")
    grid, mean, se, coefs = gaussian_cross_validate(x_res, a_res, folds, seed)
    i_min, i_1se = select_lambda(grid, mean, se)
    w = coefs[i_min if lambda_rule == "min" else i_1se]
    u, contrib = decorrelated_score(data, beta, w)
    sd = float(np.std(contrib))
    kept = tuple(name for name, c in zip(data.covariate_names, beta) if c != 0)
    result = make_test(math.sqrt(data.n) * u, sd * sd, "decorrelated", kept)
    # report U itself as the score; the statistic is sqrt(n) U / sd
    return TestResult(result.statistic, u, result.variance, result.p_value, kept, "decorrelated")


def logrank(data: Dataset, variance: str = "robust") -> TestResult:
    return logrank_test(data, variance)
