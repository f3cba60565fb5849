"""Right-censored samples, Kaplan-Meier estimation and the logrank test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.stats import norm

from .errors import DataError

TREATMENT = "treatment"
TEST_METHODS = ("logrank", "wald_robust", "score", "decorrelated")


class SurvivalRow(NamedTuple):
    time: float
    status: int
    treatment: int
    covariates: tuple


@dataclass(frozen=True, eq=False)
class Dataset:
    """A right-censored two-arm sample.

    Stored column-wise: ``time`` (n,), ``status`` (n,) with 1 for an observed
    event, ``treatment`` (n,) in {0, 1} and ``covariates`` (n, p).
    """

    time: np.ndarray
    status: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        time = np.asarray(self.time, dtype=np.float64).reshape(-1)
        n = time.shape[0]
        status = _binary(self.status, "status", n)
        treatment = _binary(self.treatment, "treatment", n)
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.size == 0:
            cov = np.zeros((n, 0))
        if cov.ndim == 1:
            cov = cov.reshape(n, -1)
        names = tuple(self.covariate_names)
        if not names and cov.shape[1]:
            names = tuple(f"X{j + 1}" for j in range(cov.shape[1]))
        if cov.shape != (n, len(names)):
            raise DataError(
                f"covariates have shape {cov.shape}, expected ({n}, {len(names)})"
            )
        if len(set(names)) != len(names):
            raise DataError("duplicate covariate names")
        if TREATMENT in names:
            raise DataError(f"'{TREATMENT}' is reserved and cannot name a covariate")
        if n and not (np.all(np.isfinite(time)) and np.all(time > 0)):
            raise DataError("observed times must be positive and finite")
        if not np.all(np.isfinite(cov)):
            raise DataError("covariates must be finite")
        for name, arr in (("time", time), ("status", status),
                          ("treatment", treatment), ("covariates", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_rows(cls, rows: Iterable, covariate_names: Sequence[str]) -> "Dataset":
        rows = [SurvivalRow(*r) for r in rows]
        p = len(covariate_names)
        for i, r in enumerate(rows):
            if len(r.covariates) != p:
                raise DataError(f"row {i} has {len(r.covariates)} covariates, expected {p}")
        return cls(
            time=[r.time for r in rows],
            status=[r.status for r in rows],
            treatment=[r.treatment for r in rows],
            covariates=np.array([list(r.covariates) for r in rows],
                                dtype=np.float64).reshape(len(rows), p),
            covariate_names=tuple(covariate_names),
        )

    @property
    def rows(self) -> list:
        return [
            SurvivalRow(float(t), int(d), int(a), tuple(float(v) for v in x))
            for t, d, a, x in zip(self.time, self.status, self.treatment, self.covariates)
        ]

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """Covariate matrix restricted to ``names``, in the given order."""
        index = {name: j for j, name in enumerate(self.covariate_names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise DataError(f"unknown covariates: {', '.join(missing)}")
        return self.covariates[:, [index[name] for name in names]]

    def design(self, names: Sequence[str] = (), include_treatment: bool = True) -> np.ndarray:
        cols = self.columns(list(names))
        if include_treatment:
            cols = np.column_stack([self.treatment.astype(np.float64), cols])
        return cols

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.time[index], self.status[index], self.treatment[index],
                       self.covariates[index], self.covariate_names)

    def with_status(self, status) -> "Dataset":
        return Dataset(self.time, status, self.treatment, self.covariates,
                       self.covariate_names)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.covariate_names == other.covariate_names
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.status, other.status)
                and np.array_equal(self.treatment, other.treatment)
                and np.array_equal(self.covariates, other.covariates))

    __hash__ = None


def _binary(values, name, n):
    arr = np.asarray(values)
    if arr.shape != (n,):
        raise DataError(f"{name} must have length {n}")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise DataError(f"{name} must contain only 0/1 values")
    return arr.astype(np.int64)


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function.

    Equals ``initial_value`` on ``[0, knots[0])`` and ``values[k]`` on
    ``[knots[k], knots[k + 1])``.
    """

    knots: np.ndarray
    values: np.ndarray
    initial_value: float = 1.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if knots.shape != values.shape:
            raise ValueError("knots and values must have equal length")
        if knots.size > 1 and not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "initial_value", float(self.initial_value))

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        table = np.concatenate([[self.initial_value], self.values])
        out = table[idx + 1]
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TestResult:
    """Outcome of a test of no treatment effect.

    ``statistic`` is referred to N(0, 1); ``score`` is the unstandardized
    quantity it was built from (a coefficient for Wald tests).
    """

    __test__ = False  # keep pytest from collecting this class

    statistic: float
    score: float
    variance: float
    p_value: float
    adjustment_set: tuple
    method: str

    def __post_init__(self):
        if self.method not in TEST_METHODS:
            raise ValueError(f"unknown test method {self.method!r}")


def two_sided_p(statistic: float) -> float:
    return float(2.0 * norm.sf(abs(statistic)))


def make_test(score: float, variance: float, method: str, adjustment_set=()) -> TestResult:
    if not variance > 0:
        statistic = 0.0 if score == 0 else math.copysign(math.inf, score)
    else:
        statistic = score / math.sqrt(variance)
    return TestResult(
        statistic=float(statistic),
        score=float(score),
        variance=float(variance),
        p_value=two_sided_p(statistic),
        adjustment_set=tuple(adjustment_set),
        method=method,
    )


class TimeGroups(NamedTuple):
    """Rows sorted by time with their distinct-time groups.

    ``order`` sorts the original rows; ``starts[g]`` is the first sorted
    position of group ``g`` and ``inverse`` maps sorted rows to groups.
    The risk set of group ``g`` is every sorted row from ``starts[g]`` on,
    so events come before censorings at a shared time.
    """

    order: np.ndarray
    times: np.ndarray
    starts: np.ndarray
    inverse: np.ndarray
    events: np.ndarray


def time_groups(data: Dataset) -> TimeGroups:
    # lexsort on (time, status, treatment) keeps tied rows in a canonical
    # order, so row permutations cannot change any floating-point sum
    order = np.lexsort((data.treatment, data.status, data.time))
    t = data.time[order]
    times, starts, inverse = np.unique(t, return_index=True, return_inverse=True)
    events = np.bincount(inverse, weights=data.status[order], minlength=times.size)
    return TimeGroups(order, times, starts, inverse.reshape(-1), events)


def censoring_dataset(data: Dataset) -> Dataset:
    """Swap the roles of event and censoring."""
    return data.with_status(1 - data.status)


def kaplan_meier(data: Dataset, group: int | None = None) -> StepFunction:
    """Product-limit survival estimate, optionally within one treatment arm.

    Knots sit at the distinct event times; censored-only times shrink the
    risk set without adding a knot.
    """
    if group is not None:
        data = data.subset(data.treatment == group)
    if data.n == 0:
        raise DataError("empty group")
    tg = time_groups(data)
    at_risk = data.n - tg.starts
    has_event = tg.events > 0
    factors = 1.0 - tg.events[has_event] / at_risk[has_event]
    return StepFunction(tg.times[has_event], np.cumprod(factors), 1.0)


def logrank_test(data: Dataset, variance: str = "robust") -> TestResult:
    """Two-arm logrank test.

    Parameters
    ----------
    data : Dataset
        Both arms must be present and at least one event observed.
    variance : {'robust', 'model'}
        ``'model'`` uses the hypergeometric variance of the textbook test.
        ``'robust'`` uses the sum of squared score residuals of the null
        treatment-only Cox model, which stays valid when censoring is
        informative within arms but independent of treatment.

    Returns
    -------
    TestResult
        ``score`` is the observed minus expected number of treated events.
    """
    if variance not in ("robust", "model"):
        raise ValueError("variance must be 'robust' or 'model'")
    if data.n_events == 0:
        raise DataError("no events")
    n_treated = int(data.treatment.sum())
    if n_treated == 0 or n_treated == data.n:
        raise DataError("logrank test needs both treatment arms")

    tg = time_groups(data)
    a = data.treatment[tg.order].astype(np.float64)
    d = data.status[tg.order].astype(np.float64)
    n_risk = (data.n - tg.starts).astype(np.float64)
    n1_risk = np.cumsum(a[::-1])[::-1][tg.starts]
    d1 = np.bincount(tg.inverse, weights=a * d, minlength=tg.times.size)
    mean_a = n1_risk / n_risk

    score = float(np.sum(d1 - tg.events * mean_a))
    if variance == "model":
        ties = np.where(n_risk > 1, (n_risk - tg.events) / np.maximum(n_risk - 1, 1), 0.0)
        var = float(np.sum(tg.events * mean_a * (1.0 - mean_a) * ties))
    else:
        hazard = tg.events / n_risk
        cum_h = np.cumsum(hazard)[tg.inverse]
        cum_g = np.cumsum(hazard * mean_a)[tg.inverse]
        resid = d * (a - mean_a[tg.inverse]) - (a * cum_h - cum_g)
        var = float(np.sum(resid * resid))
    return make_test(score, var, "logrank")
