"""Unpenalized Cox proportional-hazards regression with Breslow ties."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import (ConvergenceError, DataError, SeparationError,
                     SingularInformationError)
from .survival import (TREATMENT, Dataset, StepFunction, TestResult, TimeGroups,
                       make_test, time_groups)

STEP_TOL = 1e-10
LOGLIK_RTOL = 1e-12
MAX_HALVINGS = 30
SEPARATION_BOUND = 50.0


@dataclass(frozen=True, eq=False)
class CoxFit:
    """A converged Cox model.

    Coefficients are ordered as ``names``: the treatment first (when it was
    included) followed by ``adjustment_set``.
    """

    coefficients: np.ndarray
    names: tuple
    adjustment_set: tuple
    include_treatment: bool
    loglik: float
    model_information: np.ndarray
    robust_variance: np.ndarray
    baseline_cumhaz: StepFunction
    n_iter: int

    @property
    def treatment_coef(self) -> float:
        if not self.include_treatment:
            raise ValueError("model was fitted without the treatment")
        return float(self.coefficients[0])

    @property
    def model_variance(self) -> np.ndarray:
        return _inverse(self.model_information)

    def linear_predictor(self, treatment, covariates) -> np.ndarray:
        covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        beta = self.coefficients
        if self.include_treatment:
            eta = covariates @ beta[1:] + beta[0] * np.asarray(treatment, dtype=np.float64)
        else:
            eta = covariates @ beta
        return eta


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    times: np.ndarray
    probabilities: np.ndarray
    label: str = ""


class _Sorted:
    """Design and outcome sorted by time, plus the tie-group structure."""

    def __init__(self, data: Dataset, z: np.ndarray):
        self.groups: TimeGroups = time_groups(data)
        order = self.groups.order
        self.z = z[order]
        self.status = data.status[order].astype(np.float64)
        self.n_events = float(self.status.sum())


def _risk_terms(s: _Sorted, beta: np.ndarray):
    """Risk-set sums at every distinct time for linear predictor z @ beta."""
    g = s.groups
    eta = s.z @ beta
    shift = float(eta.max()) if eta.size else 0.0
    r = np.exp(eta - shift)
    s0 = np.cumsum(r[::-1])[::-1][g.starts]
    rz = r[:, None] * s.z
    s1 = np.cumsum(rz[::-1], axis=0)[::-1][g.starts]
    return eta, shift, r, s0, s1


def partial_likelihood(s: _Sorted, beta: np.ndarray, order: int = 2):
    """Breslow log partial likelihood with its gradient and Hessian."""
    g = s.groups
    eta, shift, r, s0, s1 = _risk_terms(s, beta)
    ev = g.events
    loglik = float(s.status @ eta - ev @ (np.log(s0) + shift))
    zbar = s1 / s0[:, None]
    grad = s.status @ s.z - ev @ zbar
    if order < 2:
        return loglik, grad
    # sum_g d_g S2_g / S0_g == sum_i r_i H(t_i) z_i z_i^T with H the Breslow hazard
    cum_h = np.cumsum(ev / s0)[g.inverse]
    weighted = s.z * (r * cum_h)[:, None]
    hess = -(weighted.T @ s.z - (zbar * ev[:, None]).T @ zbar)
    return loglik, grad, hess


def _cholesky(info: np.ndarray):
    try:
        return linalg.cho_factor(info, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularInformationError("singular information") from exc


def _inverse(info: np.ndarray) -> np.ndarray:
    if info.size == 0:
        return np.zeros((0, 0))
    factor = _cholesky(info)
    inv = linalg.cho_solve(factor, np.eye(info.shape[0]))
    return (inv + inv.T) / 2.0


def _newton(s: _Sorted, p: int, max_iter: int):
    beta = np.zeros(p)
    loglik, grad, hess = partial_likelihood(s, beta)
    if p == 0:
        return beta, loglik, -hess, 0
    for it in range(1, max_iter + 1):
        try:
            factor = _cholesky(-hess)
        except SingularInformationError as exc:
            if it == 1:
                raise
            # information vanished along the path: a coefficient is running off
            raise SeparationError("separation: information vanished as the "
                                  "coefficients diverged") from exc
        step = linalg.cho_solve(factor, grad)
        # the gradient alone can underflow while the Newton step stays O(1)
        if np.max(np.abs(step)) < STEP_TOL:
            return beta, loglik, -hess, it - 1
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError("separation: Newton steps keep pushing "
                                  f"|coefficient| beyond {SEPARATION_BOUND:g}")
        for _ in range(MAX_HALVINGS + 1):
            trial = beta + step
            new_loglik, new_grad, new_hess = partial_likelihood(s, trial)
            if np.isfinite(new_loglik) and new_loglik >= loglik - 1e-12 * abs(loglik):
                break
            step = step / 2.0
        else:
            raise ConvergenceError("step halving failed to increase the partial likelihood",
                                   iterate=beta)
        change = new_loglik - loglik
        beta, loglik, grad, hess = trial, new_loglik, new_grad, new_hess
        if abs(change) <= LOGLIK_RTOL * max(1.0, abs(loglik)) and np.max(np.abs(step)) < 1e-6:
            return beta, loglik, -hess, it
    raise ConvergenceError(f"Newton iteration did not converge in {max_iter} steps",
                           iterate=beta)


def _breslow(s: _Sorted, beta: np.ndarray) -> StepFunction:
    g = s.groups
    _, shift, _, s0, _ = _risk_terms(s, beta)
    has_event = g.events > 0
    increments = g.events[has_event] / (s0[has_event] * math.exp(shift))
    return StepFunction(g.times[has_event], np.cumsum(increments), 0.0)


def score_residuals(s: _Sorted, beta: np.ndarray) -> np.ndarray:
    """Per-subject score residuals (rows in sorted order).

    Each subject's residual is its event contribution minus its share of
    the compensator, so the residuals sum to the score and account for the
    subject's presence in other risk sets.
    """
    g = s.groups
    eta, shift, r, s0, s1 = _risk_terms(s, beta)
    zbar = s1 / s0[:, None]
    dlam = g.events / s0
    cum_h = np.cumsum(dlam)[g.inverse]
    cum_g = np.cumsum(zbar * dlam[:, None], axis=0)[g.inverse]
    return (s.status[:, None] * (s.z - zbar[g.inverse])
            - r[:, None] * (s.z * cum_h[:, None] - cum_g))


def _sandwich(s: _Sorted, beta: np.ndarray, info: np.ndarray) -> np.ndarray:
    if beta.size == 0:
        return np.zeros((0, 0))
    resid = score_residuals(s, beta)
    inv = _inverse(info)
    v = inv @ (resid.T @ resid) @ inv
    return (v + v.T) / 2.0


def _model_design(data: Dataset, adjustment_set, include_treatment):
    adjustment_set = tuple(adjustment_set)
    if len(set(adjustment_set)) != len(adjustment_set):
        raise DataError("adjustment set contains duplicates")
    z = data.design(adjustment_set, include_treatment)
    names = ((TREATMENT,) if include_treatment else ()) + adjustment_set
    return z, names, adjustment_set


def fit_cox(data: Dataset, adjustment_set: Sequence[str] = (),
            include_treatment: bool = True, max_iter: int = 100) -> CoxFit:
    """Maximize the Breslow partial likelihood by damped Newton steps.

    Raises
    ------
    DataError
        No events, or an unknown covariate name.
    SingularInformationError
        The information matrix is not positive definite (collinear design).
    SeparationError
        A coefficient diverges while the likelihood keeps increasing.
    ConvergenceError
        ``max_iter`` Newton steps were not enough; carries the last iterate.
    """
    if data.n_events == 0:
        raise DataError("no events")
    z, names, adjustment_set = _model_design(data, adjustment_set, include_treatment)
    s = _Sorted(data, z)
    beta, loglik, info, n_iter = _newton(s, z.shape[1], max_iter)
    info = (info + info.T) / 2.0
    return CoxFit(
        coefficients=beta,
        names=names,
        adjustment_set=adjustment_set,
        include_treatment=include_treatment,
        loglik=loglik,
        model_information=info,
        robust_variance=_sandwich(s, beta, info),
        baseline_cumhaz=_breslow(s, beta),
        n_iter=n_iter,
    )


def robust_variance(fit: CoxFit, data: Dataset) -> np.ndarray:
    """Sandwich variance ``A^-1 B A^-1`` of the coefficients.

    ``A`` is the observed information and ``B`` the sum of outer products
    of per-subject score residuals.
    """
    z, _, _ = _model_design(data, fit.adjustment_set, fit.include_treatment)
    s = _Sorted(data, z)
    return _sandwich(s, fit.coefficients, fit.model_information)


def wald_test(fit: CoxFit, data: Dataset | None = None) -> TestResult:
    """Robust Wald test of a zero treatment coefficient."""
    if not fit.include_treatment:
        raise ValueError("model was fitted without the treatment")
    v = fit.robust_variance if data is None else robust_variance(fit, data)
    return make_test(fit.treatment_coef, float(v[0, 0]), "wald_robust", fit.adjustment_set)


def coefficient_test(fit: CoxFit, name: str, variance: str = "robust") -> TestResult:
    """Wald test of any single coefficient of ``fit``."""
    j = fit.names.index(name)
    v = fit.robust_variance if variance == "robust" else fit.model_variance
    return make_test(float(fit.coefficients[j]), float(v[j, j]), "wald_robust",
                     fit.adjustment_set)


def score_test(data: Dataset, adjustment_set: Sequence[str] = ()) -> TestResult:
    """Model-based score test of no treatment effect.

    The nuisance coefficients are fitted under the null; with an empty
    adjustment set this is the logrank test with Cox-information variance.
    """
    null = fit_cox(data, adjustment_set, include_treatment=False)
    z, _, _ = _model_design(data, adjustment_set, True)
    s = _Sorted(data, z)
    beta = np.concatenate([[0.0], null.coefficients])
    _, grad, hess = partial_likelihood(s, beta)
    info = -hess
    if info.shape[0] == 1:
        var = float(info[0, 0])
    else:
        # efficient information for the treatment given the nuisance block
        var = float(info[0, 0] - info[0, 1:] @ np.linalg.solve(info[1:, 1:], info[1:, 0]))
    return make_test(float(grad[0]), var, "score", tuple(adjustment_set))


def predict_survival(fit: CoxFit, covariates, treatment: int, times) -> SurvivalCurve:
    """Conditional survival ``exp(-Lambda0(t) exp(eta))`` for one subject."""
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    x = np.asarray(covariates, dtype=np.float64).reshape(-1)
    if x.shape[0] != len(fit.adjustment_set):
        raise DataError(f"expected {len(fit.adjustment_set)} covariates, got {x.shape[0]}")
    eta = float(fit.linear_predictor(treatment, x[None, :])[0])
    probs = np.exp(-fit.baseline_cumhaz(times) * math.exp(eta))
    return SurvivalCurve(times, probs, f"treatment={treatment}")


def standardized_curves(fit: CoxFit, data: Dataset, treatment: int, times,
                        label: str | None = None) -> SurvivalCurve:
    """Regression-standardized survival for everyone set to ``treatment``.

    Conditional survival curves are averaged over the covariate rows of
    ``data``. Per-row predictions are sorted before averaging so the result
    does not depend on row order.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    x = data.columns(fit.adjustment_set)
    eta = fit.linear_predictor(np.full(data.n, treatment), x)
    cumhaz = fit.baseline_cumhaz(times)
    surv = np.exp(-np.outer(np.exp(eta), cumhaz))
    surv.sort(axis=0)
    probs = surv.mean(axis=0)
    return SurvivalCurve(times, probs, label or f"standardized treatment={treatment}")
