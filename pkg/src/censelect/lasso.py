"""L1-penalized Cox regression and cross-validated penalty selection.

Every coefficient, the treatment's included, is penalized. Columns are
standardized to unit (population) variance before fitting and coefficients
are reported on the original scale, following the usual glmnet convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConvergenceError, DataError, DegenerateFoldsError
from .survival import TREATMENT, Dataset, time_groups

TOL = 1e-7
MAX_OUTER = 100
MAX_SWEEPS = 100_000
FOLD_RETRIES = 10


class CoxProblem:
    """A dataset prepared for the compiled path solver.

    Rows are sorted by time; the design is treatment followed by every
    covariate.
    """

    def __init__(self, data: Dataset):
        if data.n_events == 0:
            raise DataError("no events")
        tg = time_groups(data)
        self.names = (TREATMENT,) + data.covariate_names
        self.n = data.n
        self.z = np.ascontiguousarray(data.design(data.covariate_names, True)[tg.order])
        self.status = data.status[tg.order].astype(np.float64)
        self.gstart = tg.starts.astype(np.int64)
        self.gev = tg.events.astype(np.float64)
        self.center = self.z.mean(axis=0)
        scale = self.z.std(axis=0)
        self.active = scale > 1e-12 * np.maximum(1.0, np.abs(self.center))
        self.scale = np.where(self.active, scale, 1.0)
        xs = (self.z - self.center) / self.scale
        xs[:, ~self.active] = 0.0
        self.xs = np.ascontiguousarray(xs.T)

    def null_score(self) -> np.ndarray:
        """(1/n) times the score at zero, standardized scale."""
        return _kernels.cox_score_at(self.xs, self.status, self.gstart, self.gev,
                                     np.zeros(self.xs.shape[0]))

    def lambda_max(self) -> float:
        if not self.active.any():
            raise DataError("all design columns are constant")
        return float(np.max(np.abs(self.null_score())))

    def to_original(self, theta_std: np.ndarray) -> np.ndarray:
        return theta_std / self.scale

    def to_standardized(self, theta: np.ndarray) -> np.ndarray:
        return np.where(self.active, theta * self.scale, 0.0)

    def solve_path(self, lambdas: np.ndarray, theta0=None) -> np.ndarray:
        """Standardized-scale solutions, one row per lambda."""
        m = self.xs.shape[0]
        theta0 = np.zeros(m) if theta0 is None else np.asarray(theta0, dtype=np.float64)
        lambdas = np.ascontiguousarray(lambdas, dtype=np.float64)
        out = np.zeros((lambdas.shape[0], m))
        pf = self.active.astype(np.float64)
        code, where = _kernels.cox_lasso_path(self.xs, self.status, self.gstart, self.gev,
                                              lambdas, theta0, pf, TOL, MAX_OUTER,
                                              MAX_SWEEPS, out)
        if code != _kernels.OK:
            raise ConvergenceError(
                f"lasso Cox did not converge at lambda={lambdas[where]:.6g}",
                iterate=self.to_original(out[where]))
        return out

    def objective(self, theta: np.ndarray, lam: float) -> float:
        """Penalized objective at original-scale coefficients ``theta``."""
        eta = self.z @ theta
        ll = _kernels.cox_loglik(eta, self.status, self.gstart, self.gev)
        return -ll / self.n + lam * float(np.sum(np.abs(self.to_standardized(theta))))

    def score(self, theta: np.ndarray) -> np.ndarray:
        """(1/n) score on the standardized scale at original-scale ``theta``."""
        return _kernels.cox_score_at(self.xs, self.status, self.gstart, self.gev,
                                     self.to_standardized(theta))

    def loglik_columns(self, coefs: np.ndarray) -> np.ndarray:
        """Log partial likelihood of this data for each row of ``coefs``."""
        etas = np.ascontiguousarray(coefs @ self.z.T)
        return _kernels.cox_loglik_rows(etas, self.status, self.gstart, self.gev)


@dataclass(frozen=True, eq=False)
class PenaltyPath:
    lambdas: np.ndarray
    coefficient_vectors: np.ndarray
    names: tuple
    center: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True, eq=False)
class CvResult:
    lambdas: np.ndarray
    mean_loss: np.ndarray
    se_loss: np.ndarray
    lambda_min: float
    lambda_1se: float
    index_min: int
    index_1se: int
    folds: np.ndarray
    path: PenaltyPath

    def coefficients(self, rule: str) -> np.ndarray:
        """Full-data solution at ``lambda_min`` or ``lambda_1se``."""
        return self.path.coefficient_vectors[self.index(rule)]

    def index(self, rule: str) -> int:
        if rule == "min":
            return self.index_min
        if rule == "1se":
            return self.index_1se
        raise ValueError(f"unknown lambda rule {rule!r}")

    def lambda_for(self, rule: str) -> float:
        return float(self.lambdas[self.index(rule)])


def _normalize_grid(grid) -> np.ndarray:
    grid = np.unique(np.asarray(grid, dtype=np.float64))[::-1]
    if grid.size == 0 or np.any(grid < 0):
        raise ValueError("lambda grid must be nonempty and nonnegative")
    return np.ascontiguousarray(grid)


def lambda_grid(data: Dataset, n_lambda: int = 100, ratio: float = 0.01) -> np.ndarray:
    """Log-spaced penalties from the smallest all-zero penalty downwards.

    The top value is max_j |score_j(0)| / n over standardized columns; by
    the KKT conditions it is the smallest penalty with an empty solution.
    """
    if n_lambda < 2:
        raise ValueError("n_lambda must be at least 2")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    lmax = CoxProblem(data).lambda_max()
    return lmax * ratio ** (np.arange(n_lambda) / (n_lambda - 1))


def fit_lasso_cox(data: Dataset, lam: float, warm_start=None) -> np.ndarray:
    """Lasso Cox coefficients (treatment first) at a single penalty."""
    if lam < 0:
        raise ValueError("penalty must be nonnegative")
    problem = CoxProblem(data)
    theta0 = None if warm_start is None else problem.to_standardized(np.asarray(warm_start))
    theta = problem.solve_path(np.array([lam], dtype=np.float64), theta0)[0]
    return problem.to_original(theta)


def lasso_path(data: Dataset, lambdas: Sequence[float], problem: CoxProblem | None = None
               ) -> PenaltyPath:
    problem = problem or CoxProblem(data)
    lambdas = _normalize_grid(lambdas)
    coefs = problem.to_original(problem.solve_path(lambdas))
    return PenaltyPath(lambdas, coefs, problem.names, problem.center, problem.scale)


def selected_support(coefficients, names: Sequence[str]) -> frozenset:
    """Covariates with a nonzero coefficient; the treatment is never returned."""
    coefficients = np.asarray(coefficients)
    return frozenset(name for name, c in zip(names, coefficients)
                     if c != 0 and name != TREATMENT)


def assign_folds(status: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Random fold labels, dealt round-robin within events then censorings."""
    status = np.asarray(status)
    n = status.shape[0]
    events = np.flatnonzero(status == 1)
    censored = np.flatnonzero(status == 0)
    ids = np.empty(n, dtype=np.int64)
    ids[rng.permutation(events)] = np.arange(events.size) % folds
    ids[rng.permutation(censored)] = (np.arange(censored.size) + events.size) % folds
    return ids


def stratified_folds(status: np.ndarray, folds: int, seed: int) -> np.ndarray:
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > status.shape[0]:
        raise DegenerateFoldsError("degenerate folds: more folds than observations")
    rng = np.random.default_rng(seed)
    for _ in range(FOLD_RETRIES):
        ids = assign_folds(status, folds, rng)
        if np.all(np.bincount(ids, weights=status, minlength=folds) > 0):
            return ids
    raise DegenerateFoldsError("degenerate folds: some fold has no events")


def select_lambda(lambdas, mean_loss, se_loss):
    """Indices of lambda_min and lambda_1se (largest penalty on ties)."""
    lambdas = np.asarray(lambdas)
    best = np.min(mean_loss)
    at_min = np.flatnonzero(mean_loss <= best)
    i_min = int(at_min[np.argmax(lambdas[at_min])])
    bound = mean_loss[i_min] + se_loss[i_min]
    within = np.flatnonzero(mean_loss <= bound)
    i_1se = int(within[np.argmax(lambdas[within])])
    return i_min, i_1se


def cross_validate(data: Dataset, folds: int = 20, grid=None, seed: int = 0) -> CvResult:
    """K-fold cross-validated partial likelihood over a penalty grid.

    Each fold's loss is the cross-validated deviance
    ``-2 [loglik_full(b) - loglik_train(b)]`` at the training-fold solution
    ``b``, divided by the number of held-out events. Folds are combined with
    event-count weights, as in ``cv.glmnet`` for the Cox family.
    """
    problem = CoxProblem(data)
    grid = lambda_grid(data) if grid is None else _normalize_grid(grid)
    ids = stratified_folds(data.status, folds, seed)
    full_ll_problem = problem
    raw = np.empty((folds, grid.size))
    weights = np.bincount(ids, weights=data.status, minlength=folds)
    for k in range(folds):
        train = CoxProblem(data.subset(ids != k))
        coefs = train.to_original(train.solve_path(grid))
        raw[k] = -2.0 * (full_ll_problem.loglik_columns(coefs) - train.loglik_columns(coefs))
        raw[k] /= weights[k]
    mean = weights @ raw / weights.sum()
    var = weights @ (raw - mean) ** 2 / weights.sum() / (folds - 1)
    se = np.sqrt(var)
    i_min, i_1se = select_lambda(grid, mean, se)
    path = lasso_path(data, grid, problem)
    return CvResult(grid, mean, se, float(grid[i_min]), float(grid[i_1se]),
                    i_min, i_1se, ids, path)


# -- Gaussian lasso (used by the decorrelated score test) -----------------


def gaussian_lasso_path(x: np.ndarray, y: np.ndarray, lambdas) -> np.ndarray:
    """Lasso least squares without intercept on standardized columns.

    Returns original-scale coefficients, one row per lambda.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    scale = np.sqrt(np.mean(x * x, axis=0))
    active = scale > 0
    scale = np.where(active, scale, 1.0)
    xs = np.ascontiguousarray((x / scale).T)
    lambdas = np.ascontiguousarray(lambdas, dtype=np.float64)
    out = np.zeros((lambdas.size, x.shape[1]))
    code, where = _kernels.gaussian_lasso_path(xs, y, lambdas, active.astype(np.float64),
                                               TOL * 0.1, MAX_SWEEPS, out)
    if code != _kernels.OK:
        raise ConvergenceError(f"lasso regression did not converge at lambda={lambdas[where]:.6g}",
                               iterate=out[where] / scale)
    return out / scale


def gaussian_cross_validate(x, y, folds: int, seed: int, n_lambda: int = 100,
                            ratio: float = 0.01):
    """Cross-validated lasso regression; returns (lambdas, mean, se, coefs)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    scale = np.sqrt(np.mean(x * x, axis=0))
    if not np.any(scale > 0):
        raise DataError("lasso regression design is all zero")
    lmax = float(np.max(np.abs((x / np.where(scale > 0, scale, 1.0)).T @ y)) / n)
    if lmax == 0:
        lmax = 1.0
    grid = lmax * ratio ** (np.arange(n_lambda) / (n_lambda - 1))
    rng = np.random.default_rng(seed)
    ids = rng.permutation(np.arange(n) % folds)
    raw = np.empty((folds, grid.size))
    for k in range(folds):
        held = ids == k
        coefs = gaussian_lasso_path(x[~held], y[~held], grid)
        resid = y[held, None] - x[held] @ coefs.T
        raw[k] = np.mean(resid ** 2, axis=0)
    mean = raw.mean(axis=0)
    se = raw.std(axis=0, ddof=1) / np.sqrt(folds)
    coefs = gaussian_lasso_path(x, y, grid)
    return grid, mean, se, coefs
