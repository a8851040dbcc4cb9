"""Iterated conditional expectation (ICE) g-computation as stacked estimating equations.

The parameter vector is ordered backwards through time,
``theta = (beta_{tau-1}, ..., beta_0, mu)``. Block ``k`` is the (fractional)
logistic score of the model fit with regressors X_k among units with
C_{k+1} = 0 (and, when stratified, who followed the plan through k). Its
dependent variable is Y_tau for the last block and otherwise the pseudo-outcome
expit(X*_{k+1} beta_{k+1}) predicted under the plan. The final row is
expit(X*_0 beta_0) - mu.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .data import LongitudinalDataset, TreatmentPlan, followers_mask, validate
from .design import DesignSpec, design_matrix
from .logistic import RankDeficientDesign, expit, fit_logistic, logit  # noqa: F401
from .mest import (ConvergenceFailure, EstimatingSystem, NonFiniteEvaluation, SingularBread,
                   SolveConfig, m_estimate, wald_ci)

OUTCOME_KINDS = ("repeated_measures", "time_to_event")


class DimensionMismatch(ValueError):
    pass


class EventNonMonotone(ValueError):
    pass


@dataclass(frozen=True)
class IceConfig:
    design: DesignSpec
    stratified: bool = False
    outcome_kind: str = "repeated_measures"
    link: str = "logit"

    def __post_init__(self):
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ValueError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.link != "logit":
            raise NotImplementedError(f"link {self.link!r} is not implemented")

    def model_design(self) -> DesignSpec:
        # within a stratum of plan followers treatment is constant
        return self.design.without_treatment() if self.stratified else self.design


@dataclass
class IceTheta:
    betas: List[np.ndarray]
    mu: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=float) for b in reversed(self.betas)] + [[self.mu]])

    @classmethod
    def from_vector(cls, theta, widths) -> "IceTheta":
        betas = [None] * len(widths)
        pos = 0
        for k in reversed(range(len(widths))):
            betas[k] = np.asarray(theta[pos:pos + widths[k]], dtype=float)
            pos += widths[k]
        return cls(betas=betas, mu=float(theta[pos]))


class _Prepared:
    """Design matrices, indicators and outcomes for one (dataset, plan, config)."""

    def __init__(self, dataset: LongitudinalDataset, plan: TreatmentPlan, config: IceConfig):
        if config.stratified and plan.is_natural_course:
            raise ValueError("stratification by the natural course is vacuous; use the unstratified estimator")
        spec = config.model_design()
        if spec.tau != dataset.tau:
            raise DimensionMismatch(f"design covers {spec.tau} times but the data has tau={dataset.tau}")
        self.n = dataset.n
        self.tau = dataset.tau
        self.survival = config.outcome_kind == "time_to_event"
        if self.survival:
            check_events_monotone(dataset)
        self.column_names = [spec.column_names(k) for k in range(self.tau)]
        self.widths = [len(c) for c in self.column_names]
        self.X, self.Xs, self.weights, self.carry = [], [], [], []
        for k in range(self.tau):
            present = dataset.uncensored(k)
            x = design_matrix(dataset, k, spec)
            xs = x if plan.is_natural_course else design_matrix(dataset, k, spec, plan)
            x = np.where(present[:, None], x, 0.0)
            xs = np.where(present[:, None], xs, 0.0)
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xs))):
                raise DimensionMismatch(f"design for time {k} has missing values among uncensored units")
            w = dataset.uncensored(k + 1).astype(float)
            if config.stratified:
                w = w * followers_mask(dataset, plan, k)
            self.X.append(x)
            self.Xs.append(xs)
            self.weights.append(w)
            if self.survival and k > 0:
                self.carry.append(present & (dataset.y(k) == 1))
            else:
                self.carry.append(np.zeros(self.n, dtype=bool))
        self.final_outcome = np.where(dataset.uncensored(self.tau), dataset.y(self.tau), 0.0)

    def predict(self, k, beta):
        """Pseudo-outcome expit(X*_k beta_k), or 1 after an observed event."""
        p = expit(self.Xs[k] @ beta)
        return np.where(self.carry[k], 1.0, p)


def check_events_monotone(dataset: LongitudinalDataset):
    for k in range(1, dataset.tau):
        both = dataset.uncensored(k + 1)
        revert = both & (dataset.y(k) == 1) & (dataset.y(k + 1) == 0)
        if revert.any():
            i = int(np.flatnonzero(revert)[0])
            raise EventNonMonotone(f"unit {dataset.ids[i]}: outcome reverts from 1 to 0 at time {k + 1}")


class IceSystem(EstimatingSystem):
    """Estimating system for one plan, with helpers to read theta."""

    def __init__(self, dataset, plan, config):
        prep = _Prepared(dataset, plan, config)
        self.prep = prep
        self.plan = plan
        self.config = config
        self.slices = {}
        pos = 0
        names = []
        for k in reversed(range(prep.tau)):
            self.slices[k] = slice(pos, pos + prep.widths[k])
            pos += prep.widths[k]
            names += [f"beta{k}[{c}]" for c in prep.column_names[k]]
        self.mu_index = pos
        names.append("mu")
        super().__init__(self._psi, n=prep.n, v=pos + 1, names=names)

    def _psi(self, theta):
        prep = self.prep
        out = np.empty((self.v, self.n))
        target = prep.final_outcome
        for k in reversed(range(prep.tau)):
            beta = theta[self.slices[k]]
            resid = prep.weights[k] * (target - expit(prep.X[k] @ beta))
            out[self.slices[k]] = (prep.X[k] * resid[:, None]).T
            target = prep.predict(k, beta)
        out[self.mu_index] = target - theta[self.mu_index]
        return out

    def pseudo_outcomes(self, theta) -> List[np.ndarray]:
        """Pseudo-outcomes predicted at each time k (index k holds the predictions from X*_k)."""
        return [self.prep.predict(k, theta[self.slices[k]]) for k in range(self.prep.tau)]

    def unpack(self, theta) -> IceTheta:
        return IceTheta.from_vector(theta, self.prep.widths)

    def cold_start(self) -> np.ndarray:
        theta = np.zeros(self.v)
        theta[self.mu_index] = 0.5
        return theta


def build_unstratified_system(dataset, plan, config: IceConfig) -> IceSystem:
    if config.outcome_kind != "repeated_measures":
        raise ValueError("use build_survival_system for time-to-event outcomes")
    return IceSystem(dataset, plan, replace(config, stratified=False))


def build_stratified_system(dataset, plan, config: IceConfig) -> IceSystem:
    if config.outcome_kind != "repeated_measures":
        raise ValueError("use build_survival_system for time-to-event outcomes")
    return IceSystem(dataset, plan, replace(config, stratified=True))


def build_survival_system(dataset, plan, config: IceConfig) -> IceSystem:
    return IceSystem(dataset, plan, replace(config, outcome_kind="time_to_event"))


def build_system(dataset, plan, config: IceConfig) -> IceSystem:
    return IceSystem(dataset, plan, config)


class StackedContrastSystem(EstimatingSystem):
    """Two per-plan systems plus a row for mu_d = mu_a - mu_b."""

    def __init__(self, system_a: IceSystem, system_b: IceSystem):
        if system_a.n != system_b.n:
            raise DimensionMismatch("both plans must use the same units")
        self.system_a = system_a
        self.system_b = system_b
        self.offset_b = system_a.v
        self.d_index = system_a.v + system_b.v
        names = ([f"a:{s}" for s in system_a.names] + [f"b:{s}" for s in system_b.names]
                 + ["mu_d"])
        super().__init__(self._psi, n=system_a.n, v=self.d_index + 1, names=names)

    def _psi(self, theta):
        ta = theta[:self.offset_b]
        tb = theta[self.offset_b:self.d_index]
        diff = ta[self.system_a.mu_index] - tb[self.system_b.mu_index] - theta[self.d_index]
        return np.vstack([self.system_a.evaluate(ta), self.system_b.evaluate(tb),
                          np.full((1, self.n), diff)])

    @property
    def mu_a_index(self):
        return self.system_a.mu_index

    @property
    def mu_b_index(self):
        return self.offset_b + self.system_b.mu_index

    def cold_start(self):
        return np.concatenate([self.system_a.cold_start(), self.system_b.cold_start(), [0.0]])


def build_stacked_contrast_system(dataset, plan_a, plan_b, config: IceConfig,
                                  config_b: Optional[IceConfig] = None) -> StackedContrastSystem:
    return StackedContrastSystem(IceSystem(dataset, plan_a, config),
                                 IceSystem(dataset, plan_b, config_b or config))


@dataclass
class SequentialFit:
    theta: IceTheta
    separated: List[bool]
    iterations: List[int]

    @property
    def mu(self):
        return self.theta.mu


def sequential_ice(dataset: LongitudinalDataset, plan: TreatmentPlan, config: IceConfig,
                   tol: float = 1e-10) -> SequentialFit:
    """Point estimate by fitting the outcome models backwards through time.

    Fit the model for Y_tau among the uncensored (and plan followers when
    stratified), predict under the plan for everyone uncensored at the
    preceding time, regress those predictions on the earlier history, and so
    on down to baseline; the estimate is the mean of the baseline predictions.

    ``tol`` bounds the max-norm of each model's score divided by n. Under
    separation the coefficients drift until the score meets it, so a tighter
    tolerance only pushes them further out.

    Raises
    ------
    RankDeficientDesign
        When a model cannot be identified (for example an empty stratum).
    ConvergenceFailure
        When a fit does not converge.
    """
    prep = _Prepared(dataset, plan, config)
    betas = [None] * prep.tau
    separated = [False] * prep.tau
    iterations = [0] * prep.tau
    target = prep.final_outcome
    for k in reversed(range(prep.tau)):
        rows = prep.weights[k] > 0
        try:
            fit = fit_logistic(prep.X[k][rows], target[rows], scale=prep.n, tol=tol)
        except RankDeficientDesign as exc:
            raise RankDeficientDesign(f"model for time {k}: {exc}") from None
        betas[k] = fit.beta
        separated[k] = fit.separated
        iterations[k] = fit.iterations
        target = prep.predict(k, fit.beta)
    mu = float(np.mean(target))
    return SequentialFit(theta=IceTheta(betas=betas, mu=mu), separated=separated, iterations=iterations)


@dataclass
class EstimateResult:
    """Point estimate with sandwich standard error and Wald interval.

    ``covariance`` is the estimated covariance matrix of theta_hat; ``theta``
    is None when estimation failed before a root was found.
    """

    mu_hat: float
    se: float
    ci: tuple
    theta: Optional[IceTheta]
    covariance: Optional[np.ndarray]
    converged: bool
    iterations: int
    plan: str = ""
    failure: Optional[str] = None
    residual: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "plan": self.plan,
            "mu_hat": _num(self.mu_hat),
            "se": _num(self.se),
            "ci_lower": _num(self.ci[0]),
            "ci_upper": _num(self.ci[1]),
            "converged": self.converged,
            "iterations": self.iterations,
            "root_residual": _num(self.residual),
            "failure": self.failure,
            "diagnostics": self.diagnostics,
        }


def _num(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _failed(plan, reason, iterations=0, diagnostics=None):
    return EstimateResult(mu_hat=float("nan"), se=float("nan"), ci=(float("nan"), float("nan")),
                          theta=None, covariance=None, converged=False, iterations=iterations,
                          plan=plan.label(), failure=reason, diagnostics=diagnostics or {})


def _initial_value(dataset, plan, config, system, solve_config):
    """Warm start from the sequential fit, or a cold start when it does not converge."""
    try:
        seq = sequential_ice(dataset, plan, config, tol=solve_config.root_tolerance / 10)
    except RankDeficientDesign:
        raise
    except ConvergenceFailure:
        return system.cold_start(), {"warm_start": False}
    return seq.theta.to_vector(), {"warm_start": True, "separation": seq.separated}


def estimate(dataset: LongitudinalDataset, plan: TreatmentPlan, config: IceConfig,
             solve_config: SolveConfig = None, level: float = 0.95, check: bool = True) -> EstimateResult:
    """Estimate the mean outcome at tau under ``plan`` with sandwich inference.

    Solver failures are returned as a result with ``converged=False`` and a
    ``failure`` message rather than raised.
    """
    solve_config = solve_config or SolveConfig()
    if check:
        validate(dataset)
    system = build_system(dataset, plan, config)
    try:
        init, diagnostics = _initial_value(dataset, plan, config, system, solve_config)
    except RankDeficientDesign as exc:
        return _failed(plan, str(exc))
    try:
        fit = m_estimate(system, init, solve_config)
    except ConvergenceFailure as exc:
        return _failed(plan, str(exc), exc.iterations, diagnostics)
    except (SingularBread, NonFiniteEvaluation) as exc:
        return _failed(plan, str(exc), 0, diagnostics)
    mu = float(fit.theta[system.mu_index])
    se = float(fit.standard_errors[system.mu_index])
    return EstimateResult(mu_hat=mu, se=se, ci=wald_ci(mu, se, level), theta=system.unpack(fit.theta),
                          covariance=fit.variance, converged=True, iterations=fit.iterations,
                          plan=plan.label(), residual=fit.residual, diagnostics=diagnostics)


@dataclass
class ContrastResult:
    plan_a: str
    plan_b: str
    mu_a: float
    mu_b: float
    mu_d: float
    se: dict
    ci: dict
    converged: bool
    iterations: int
    theta: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None
    failure: Optional[str] = None
    residual: float = float("nan")

    def to_record(self) -> dict:
        rec = {"plan_a": self.plan_a, "plan_b": self.plan_b, "converged": self.converged,
               "iterations": self.iterations, "root_residual": _num(self.residual),
               "failure": self.failure}
        for key, value in (("mu_a", self.mu_a), ("mu_b", self.mu_b), ("mu_d", self.mu_d)):
            rec[key] = {"mu_hat": _num(value), "se": _num(self.se.get(key, np.nan)),
                        "ci_lower": _num(self.ci.get(key, (np.nan,) * 2)[0]),
                        "ci_upper": _num(self.ci.get(key, (np.nan,) * 2)[1])}
        return rec


def estimate_contrast(dataset, plan_a, plan_b, config: IceConfig, config_b: Optional[IceConfig] = None,
                      solve_config: SolveConfig = None, level: float = 0.95,
                      check: bool = True) -> ContrastResult:
    """Jointly estimate mu_a, mu_b and mu_d = mu_a - mu_b from the stacked system."""
    solve_config = solve_config or SolveConfig()
    if check:
        validate(dataset)
    config_b = config_b or config
    system = build_stacked_contrast_system(dataset, plan_a, plan_b, config, config_b)
    nan2 = (float("nan"), float("nan"))
    blank = dict(plan_a=plan_a.label(), plan_b=plan_b.label(), mu_a=float("nan"), mu_b=float("nan"),
                 mu_d=float("nan"), se={}, ci={}, converged=False, iterations=0)
    try:
        init_a, _ = _initial_value(dataset, plan_a, config, system.system_a, solve_config)
        init_b, _ = _initial_value(dataset, plan_b, config_b, system.system_b, solve_config)
    except RankDeficientDesign as exc:
        return ContrastResult(**blank, failure=str(exc))
    d0 = init_a[system.system_a.mu_index] - init_b[system.system_b.mu_index]
    init = np.concatenate([init_a, init_b, [d0]])
    try:
        fit = m_estimate(system, init, solve_config)
    except ConvergenceFailure as exc:
        return ContrastResult(**{**blank, "iterations": exc.iterations}, failure=str(exc))
    except (SingularBread, NonFiniteEvaluation) as exc:
        return ContrastResult(**blank, failure=str(exc))
    idx = {"mu_a": system.mu_a_index, "mu_b": system.mu_b_index, "mu_d": system.d_index}
    est = {k: float(fit.theta[i]) for k, i in idx.items()}
    se = {k: float(fit.standard_errors[i]) for k, i in idx.items()}
    ci = {k: wald_ci(est[k], se[k], level) if np.isfinite(se[k]) else nan2 for k in idx}
    return ContrastResult(plan_a=plan_a.label(), plan_b=plan_b.label(), mu_a=est["mu_a"],
                          mu_b=est["mu_b"], mu_d=est["mu_d"], se=se, ci=ci, converged=True,
                          iterations=fit.iterations, theta=fit.theta, covariance=fit.variance,
                          residual=fit.residual)
