"""Simulated randomized trials with covariate-dependent censoring.

Covariates are standard normal, treatment is a fair coin, and both the
event and the censoring time are exponential given (A, X). The event time
never depends on treatment, so every test of no treatment effect should
reject at its nominal level; censoring that depends on A and on X makes
that fail for procedures that do not adjust for the right covariates.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .cox import standardized_curves
from .errors import CenselectError, ConfigError
from .lasso import cross_validate
from .selection import (decorrelated_score_test, double_selection, post_lasso,
                        significance_selection_single)
from .survival import Dataset, censoring_dataset, kaplan_meier, logrank_test

log = logging.getLogger(__name__)

SETTINGS = ("S1", "S2", "S3", "single_covariate")
METHODS = ("logrank", "post_lasso_min", "post_lasso_1se", "double_min", "double_1se",
           "significance_single", "decorrelated")
CURVE_METHODS = ("km", "post_lasso", "double")
SINGLE_BASELINES = (1.0, -1.0)


def nu_vectors(setting: str, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Covariate effect directions (nu_T, nu_C) for settings S1-S3, zero-padded to p."""
    if setting not in SETTINGS[:3]:
        raise ConfigError(f"no direction vectors for setting {setting!r}")
    if p < 10:
        raise ConfigError(f"settings S1-S3 need p >= 10, got {p}")
    decay = 1.0 / np.arange(1, 11)
    fifths = np.tile(1.0 / np.arange(1, 6), 2)
    rising = np.tile(1.0 / np.arange(5, 0, -1), 2)
    nu_t, nu_c = {"S1": (decay, fifths), "S2": (fifths, decay), "S3": (fifths, rising)}[setting]
    pad = np.zeros(p - 10)
    return np.concatenate([nu_t, pad]), np.concatenate([nu_c, pad])


@dataclass(frozen=True)
class DgpConfig:
    """One simulation scenario.

    In settings S1-S3 the event rate is ``exp(beta0 + b nu_T'X)`` and the
    censoring rate ``exp(gamma0 + gamma1 A + g nu_C'X)``. In
    ``single_covariate`` mode p is 1, the slopes are ``beta_single`` and
    ``gamma2_single``, and the baselines default to ``beta0=1``,
    ``gamma0=-1``.
    """

    n: int = 400
    p: int = 30
    setting: str = "S1"
    b: float = 0.0
    g: float = 0.0
    gamma1: float = 0.0
    beta0: float | None = None
    gamma0: float | None = None
    beta_single: float = 0.0
    gamma2_single: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if isinstance(self.n, bool) or not isinstance(self.n, (int, np.integer)) or self.n < 2:
            raise ConfigError(f"n must be an integer >= 2, got {self.n!r}")
        single = self.setting == "single_covariate"
        if single:
            object.__setattr__(self, "p", 1)
        elif self.p < 10:
            raise ConfigError(f"settings S1-S3 need p >= 10, got {self.p}")
        defaults = SINGLE_BASELINES if single else (0.0, 0.0)
        if self.beta0 is None:
            object.__setattr__(self, "beta0", defaults[0])
        if self.gamma0 is None:
            object.__setattr__(self, "gamma0", defaults[1])
        for name in ("b", "g", "gamma1", "beta0", "gamma0", "beta_single", "gamma2_single"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ConfigError(f"{name} must be finite")
            object.__setattr__(self, name, float(value))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "seed", int(self.seed))

    def slopes(self) -> tuple[np.ndarray, np.ndarray]:
        """Event and censoring coefficient vectors on X."""
        if self.setting == "single_covariate":
            return np.array([self.beta_single]), np.array([self.gamma2_single])
        nu_t, nu_c = nu_vectors(self.setting, self.p)
        return self.b * nu_t, self.g * nu_c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "DgpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown DGP fields: {', '.join(sorted(unknown))}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def simulate(config: DgpConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n, p = config.n, config.p
    x = rng.standard_normal((n, p))
    a = rng.integers(0, 2, size=n)
    beta, gamma2 = config.slopes()
    rate_t = np.exp(config.beta0 + x @ beta)
    rate_c = np.exp(config.gamma0 + config.gamma1 * a + x @ gamma2)
    t = rng.exponential(1.0 / rate_t)
    c = rng.exponential(1.0 / rate_c)
    return Dataset(np.minimum(t, c), (t <= c).astype(np.int64), a, x)


def replicate_seed(base_seed: int, cell: int, replicate: int) -> int:
    """Seed for one replicate, mixed from (base seed, cell, replicate) by SeedSequence."""
    state = np.random.SeedSequence([base_seed, cell, replicate]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def parallel_map(func: Callable, items: Sequence, jobs: int = 1, chunksize: int = 8) -> list:
    """Ordered map, across worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items, chunksize=chunksize))


# -- type I error grids ---------------------------------------------------


@dataclass(frozen=True)
class Type1Spec:
    """A base scenario and the axes that vary across cells.

    Cells are the Cartesian product of ``axes`` in insertion order (first
    axis slowest); each axis names a ``DgpConfig`` field.
    """

    base: DgpConfig
    axes: dict
    methods: tuple = ("logrank", "post_lasso_1se", "double_1se")
    replicates: int = 1000
    base_seed: int = 0
    level: float = 0.05
    folds: int = 20
    alpha_select: float = 0.025
    single_variance: str = "model"
    single_test: str = "score"

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s): {', '.join(unknown)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        names = {f.name for f in fields(DgpConfig)} - {"seed", "n", "p", "setting"}
        for axis, values in self.axes.items():
            if axis not in names:
                raise ConfigError(f"cannot vary {axis!r} across cells")
            if len(values) == 0:
                raise ConfigError(f"axis {axis!r} is empty")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "axes", {k: tuple(float(v) for v in vals)
                                          for k, vals in self.axes.items()})

    def cells(self) -> list[dict]:
        keys = list(self.axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*self.axes.values())]


@dataclass(frozen=True, eq=False)
class Type1Grid:
    """Rejection counts per cell and method.

    ``replicates[c, m]`` counts runs where method m returned a p-value in
    cell c; ``errors[c, m]`` counts runs where it raised instead. Errors
    are excluded from the rate denominator.
    """

    axes: dict
    cells: list
    methods: tuple
    rejections: np.ndarray
    replicates: np.ndarray
    errors: np.ndarray
    level: float

    @property
    def rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.rejections / self.replicates

    def rate(self, method: str, **cell) -> float:
        c = self.cells.index({k: float(v) for k, v in cell.items()})
        return float(self.rates[c, self.methods.index(method)])

    def records(self) -> list[dict]:
        """One row per cell and method, cells in grid order, methods by name."""
        rows = []
        for c, cell in enumerate(self.cells):
            for m in sorted(self.methods):
                j = self.methods.index(m)
                rows.append({"cell": c, **cell, "method": m,
                             "rejections": int(self.rejections[c, j]),
                             "replicates": int(self.replicates[c, j]),
                             "errors": int(self.errors[c, j]),
                             "rate": float(self.rates[c, j])})
        return rows


def run_methods(data: Dataset, methods: Iterable[str], folds: int = 20, seed: int = 0,
                alpha_select: float = 0.025, single_variance: str = "model",
                single_test: str = "score") -> dict:
    """p-value (or the exception raised) of each method on one dataset.

    Cross-validation runs shared by several methods are computed once.
    """
    cache = {}

    def cv(kind):
        if kind not in cache:
            target = data if kind == "survival" else censoring_dataset(data)
            try:
                cache[kind] = cross_validate(target, folds=folds, seed=seed)
            except CenselectError as exc:
                cache[kind] = exc
        if isinstance(cache[kind], Exception):
            raise cache[kind]
        return cache[kind]

    def censoring_cv():
        if data.n_events == data.n:
            return None
        return cv("censoring")

    out = {}
    for method in methods:
        try:
            if method == "logrank":
                result = logrank_test(data)
            elif method.startswith("post_lasso_"):
                rule = method.rsplit("_", 1)[1]
                result = post_lasso(data, rule, folds, seed, survival_cv=cv("survival")).test
            elif method.startswith("double_"):
                rule = method.rsplit("_", 1)[1]
                result = double_selection(data, rule, folds, seed, survival_cv=cv("survival"),
                                          censoring_cv=censoring_cv()).test
            elif method == "significance_single":
                result = significance_selection_single(data, alpha_select, single_variance,
                                                       single_test)
            elif method == "decorrelated":
                result = decorrelated_score_test(data, "1se", folds, seed,
                                                 survival_cv=cv("survival"))
            else:
                raise ConfigError(f"unknown method {method!r}")
            out[method] = result.p_value
        except CenselectError as exc:
            out[method] = exc
    return out


def _type1_task(task):
    spec, c, cell, r = task
    config = replace(spec.base, **cell, seed=replicate_seed(spec.base_seed, c, r))
    data = simulate(config)
    results = run_methods(data, spec.methods, spec.folds, config.seed % 2**32,
                          spec.alpha_select, spec.single_variance)
    row = []
    for m in spec.methods:
        value = results[m]
        if isinstance(value, Exception):
            log.debug("cell %d replicate %d: %s failed: %s", c, r, m, value)
            row.append(-1)
        else:
            row.append(int(value < spec.level))
    return c, row


def type1_experiment(spec: Type1Spec, jobs: int = 1) -> Type1Grid:
    """Simulate every (cell, replicate) and count rejections per method."""
    cells = spec.cells()
    tasks = [(spec, c, cell, r) for c, cell in enumerate(cells) for r in range(spec.replicates)]
    shape = (len(cells), len(spec.methods))
    rejections = np.zeros(shape, dtype=np.int64)
    valid = np.zeros(shape, dtype=np.int64)
    errors = np.zeros(shape, dtype=np.int64)
    for c, row in parallel_map(_type1_task, tasks, jobs):
        row = np.asarray(row)
        errors[c] += row < 0
        valid[c] += row >= 0
        rejections[c] += row == 1
    return Type1Grid(dict(spec.axes), cells, spec.methods, rejections, valid, errors, spec.level)


# -- score bias oracle ----------------------------------------------------


@dataclass(frozen=True)
class OracleEstimate:
    estimate: float
    mc_se: float


def default_t_max(beta0: float, gamma0: float) -> float:
    """Time by which exp(-t e^beta0) exp(-t e^gamma0) has dropped below 1e-6."""
    return math.log(1e6) / (math.exp(beta0) + math.exp(gamma0))


def score_bias_oracle(beta: float, gamma1: float, gamma2: float, beta0: float = 1.0,
                      gamma0: float = -1.0, mc_draws: int = 100_000, t_max: float | None = None,
                      t_steps: int = 2000, seed: int = 0, chunk: int = 64) -> OracleEstimate:
    """Expected unadjusted treatment score per subject when X is left out.

    Evaluates, for a single covariate X ~ N(0, 1) and a fair-coin A,

        int_0^tmax  E[A w h] - E[A w] E[w h] / E[w]  dt

    with ``w = P(T >= t | X) P(C >= t | A, X)`` and ``h = e^(beta0 + beta X)``
    the event hazard. The expectation over A is exact and the one over X
    is Monte Carlo; the t-integral uses the trapezoid rule. ``mc_se`` is a
    delta-method standard error over the X draws.
    """
    if mc_draws < 1000:
        raise ConfigError("mc_draws must be at least 1000")
    if t_max is None:
        t_max = default_t_max(beta0, gamma0)
    if not t_max > 0:
        raise ConfigError("t_max must be positive")
    if t_steps < 2:
        raise ConfigError("t_steps must be at least 2")
    x = np.random.default_rng(seed).standard_normal(mc_draws)
    hazard = np.exp(beta0 + beta * x)
    cens0 = np.exp(gamma0 + gamma2 * x)
    exit0 = hazard + cens0
    exit1 = hazard + cens0 * math.exp(gamma1)
    ts = np.linspace(0.0, t_max, t_steps)
    weights = np.full(t_steps, ts[1] - ts[0])
    weights[[0, -1]] /= 2
    total = 0.0
    influence = np.zeros(mc_draws)
    for lo in range(0, t_steps, chunk):
        t = ts[lo:lo + chunk, None]
        wt = weights[lo:lo + chunk]
        w1 = np.exp(-t * exit1)
        w0 = np.exp(-t * exit0)
        # per-draw terms with A averaged out: E[A.], E[A.h], E[.], E[.h]
        f_a = 0.5 * w1
        f_ah = f_a * hazard
        f_w = 0.5 * (w0 + w1)
        f_wh = f_w * hazard
        m_a, m_ah, m_w, m_wh = (f.mean(axis=1) for f in (f_a, f_ah, f_w, f_wh))
        ratio = m_a / m_w
        total += float(wt @ (m_ah - ratio * m_wh))
        grad_a = -m_wh / m_w
        grad_w = ratio * m_wh / m_w
        influence += wt @ (f_ah + grad_a[:, None] * f_a - ratio[:, None] * f_wh
                           + grad_w[:, None] * f_w)
    mc_se = float(np.std(influence, ddof=1) / math.sqrt(mc_draws))
    return OracleEstimate(total, mc_se)


# -- survival curves ------------------------------------------------------


def true_survival(config: DgpConfig, times, draws: int = 1_000_000, seed: int = 0,
                  chunk: int = 100_000) -> np.ndarray:
    """E[exp(-t exp(beta0 + beta'X))] by Monte Carlo over X."""
    times = np.asarray(times, dtype=np.float64)
    beta, _ = config.slopes()
    rng = np.random.default_rng(seed)
    acc = np.zeros(times.size)
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        rate = np.exp(config.beta0 + rng.standard_normal((m, config.p)) @ beta)
        acc += np.exp(-np.outer(rate, times)).sum(axis=0)
        done += m
    return acc / draws


@dataclass(frozen=True)
class CurveSpec:
    config: DgpConfig
    replicates: int = 200
    timepoints: tuple = tuple(0.5 * k for k in range(13))
    methods: tuple = CURVE_METHODS
    lambda_rule: str = "1se"
    folds: int = 20
    base_seed: int = 0
    truth_draws: int = 1_000_000

    def __post_init__(self):
        if len(self.timepoints) == 0:
            raise ConfigError("timepoints must be nonempty")
        if any(t < 0 for t in self.timepoints):
            raise ConfigError("timepoints must be nonnegative")
        unknown = [m for m in self.methods if m not in CURVE_METHODS]
        if unknown:
            raise ConfigError(f"unknown curve method(s): {', '.join(unknown)}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        object.__setattr__(self, "timepoints", tuple(float(t) for t in self.timepoints))
        object.__setattr__(self, "methods", tuple(self.methods))


@dataclass(frozen=True, eq=False)
class CurveTable:
    """Per-arm curves averaged over replicates.

    Arrays are indexed ``[method, arm, timepoint]``; ``failures[method]``
    counts replicates in which the method raised.
    """

    timepoints: np.ndarray
    methods: tuple
    truth: np.ndarray
    mean: np.ndarray
    mae: np.ndarray
    failures: np.ndarray

    @property
    def bias(self) -> np.ndarray:
        return self.mean - self.truth

    def records(self) -> list[dict]:
        rows = []
        for m in sorted(self.methods):
            j = self.methods.index(m)
            for arm in (0, 1):
                for k, t in enumerate(self.timepoints):
                    rows.append({"time": float(t), "method": m, "treatment": arm,
                                 "mean": float(self.mean[j, arm, k]),
                                 "truth": float(self.truth[k]),
                                 "bias": float(self.bias[j, arm, k]),
                                 "mae": float(self.mae[j, arm, k]),
                                 "failures": int(self.failures[j])})
        rows.sort(key=lambda r: (r["time"], r["method"], r["treatment"]))
        return rows


def _curve_task(task):
    spec, r = task
    config = replace(spec.config, seed=replicate_seed(spec.base_seed, 0, r))
    data = simulate(config)
    times = np.asarray(spec.timepoints)
    curves = {}
    cv = None
    for method in spec.methods:
        try:
            if method == "km":
                curves[method] = np.array([kaplan_meier(data, arm)(times) for arm in (0, 1)])
                continue
            if cv is None:
                cv = cross_validate(data, folds=spec.folds, seed=config.seed % 2**32)
            if method == "post_lasso":
                fit = post_lasso(data, spec.lambda_rule, spec.folds, survival_cv=cv).fit
            else:
                cens = censoring_dataset(data)
                cens_cv = (None if cens.n_events == 0 else
                           cross_validate(cens, folds=spec.folds, seed=config.seed % 2**32))
                fit = double_selection(data, spec.lambda_rule, spec.folds, survival_cv=cv,
                                       censoring_cv=cens_cv).fit
            curves[method] = np.array([standardized_curves(fit, data, arm, times).probabilities
                                       for arm in (0, 1)])
        except CenselectError as exc:
            log.debug("replicate %d: %s failed: %s", r, method, exc)
            curves[method] = None
    return curves


def curve_experiment(spec: CurveSpec, jobs: int = 1) -> CurveTable:
    """Average KM and standardized curves against the true marginal survival."""
    times = np.asarray(spec.timepoints)
    truth = true_survival(spec.config, times, spec.truth_draws, seed=spec.base_seed)
    shape = (len(spec.methods), 2, times.size)
    total = np.zeros(shape)
    abs_err = np.zeros(shape)
    count = np.zeros(len(spec.methods))
    failures = np.zeros(len(spec.methods), dtype=np.int64)
    tasks = [(spec, r) for r in range(spec.replicates)]
    for curves in parallel_map(_curve_task, tasks, jobs):
        for j, m in enumerate(spec.methods):
            curve = curves[m]
            if curve is None:
                failures[j] += 1
                continue
            total[j] += curve
            abs_err[j] += np.abs(curve - truth)
            count[j] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count[:, None, None]
        mae = abs_err / count[:, None, None]
    return CurveTable(times, spec.methods, truth, mean, mae, failures)
