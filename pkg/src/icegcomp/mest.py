"""General M-estimation: root finding for stacked estimating equations and
the empirical sandwich variance estimator.

An estimating system is represented by a vectorized callable ``psi(theta)``
returning a ``(v, n)`` array whose column ``i`` is the estimating function of
unit ``i``. Everything here works on the sum (or mean) over units.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats


class ConvergenceFailure(RuntimeError):
    """The root finder did not reach the tolerance.

    Carries the last iterate so callers can report diagnostics.
    """

    def __init__(self, message, theta=None, iterations=0, residual=np.nan):
        super().__init__(message)
        self.theta = theta
        self.iterations = iterations
        self.residual = residual


class SingularJacobian(ConvergenceFailure):
    """The Newton step cannot be computed (non-identified parameters)."""


class SingularBread(np.linalg.LinAlgError):
    pass


class NonFiniteEvaluation(ValueError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    max_iterations: int = 10000
    root_tolerance: float = 1e-9
    fd_relative_step: float = 1e-6
    fd_absolute_step: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.root_tolerance > 0:
            raise ValueError("root_tolerance must be positive")
        if not (self.fd_relative_step > 0 and self.fd_absolute_step > 0):
            raise ValueError("finite-difference steps must be positive")

    def fd_steps(self, theta):
        return np.maximum(self.fd_absolute_step, self.fd_relative_step * np.abs(theta))


class EstimatingSystem:
    """A v-dimensional estimating function evaluated over n units.

    Parameters
    ----------
    psi : callable
        ``psi(theta) -> ndarray`` of shape ``(v, n)``.
    n : int
        Number of units.
    v : int
        Parameter dimension.
    names : sequence of str, optional
        Labels for the parameters.
    """

    def __init__(self, psi: Callable[[np.ndarray], np.ndarray], n: int, v: int,
                 names: Optional[Sequence[str]] = None):
        if n < 1:
            raise ValueError("an estimating system needs at least one unit")
        self._psi = psi
        self.n = int(n)
        self.v = int(v)
        self.names = list(names) if names is not None else [f"theta{j}" for j in range(v)]
        if len(self.names) != self.v:
            raise ValueError("names must have length v")

    def evaluate(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.v,):
            raise ValueError(f"theta must have shape ({self.v},), got {theta.shape}")
        out = np.asarray(self._psi(theta), dtype=float)
        if out.ndim == 1 and self.v == 1:
            out = out[None, :]
        if out.shape != (self.v, self.n):
            raise ValueError(f"psi returned shape {out.shape}, expected {(self.v, self.n)}")
        return out

    def unit_psi(self, i: int, theta) -> np.ndarray:
        return self.evaluate(theta)[:, i]

    def sum_psi(self, theta) -> np.ndarray:
        return self.evaluate(theta).sum(axis=1)

    def mean_psi(self, theta) -> np.ndarray:
        return self.evaluate(theta).mean(axis=1)


@dataclass
class RootResult:
    theta: np.ndarray
    iterations: int
    residual: float


@dataclass
class SandwichResult:
    """Bread, meat and sandwich.

    ``covariance`` is the asymptotic covariance B^-1 F B^-T; the covariance of
    the estimator itself is ``covariance / n``.
    """

    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray
    standard_errors: np.ndarray
    n: int


def numerical_jacobian(system: EstimatingSystem, theta, config: SolveConfig = None) -> np.ndarray:
    """Central-difference Jacobian of the summed estimating function.

    Entry ``[r, j]`` approximates d(sum_i psi_r)/d theta_j.
    """
    config = config or SolveConfig()
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteEvaluation("theta contains non-finite values")
    steps = config.fd_steps(theta)
    jac = np.empty((system.v, system.v))
    for j in range(system.v):
        up = theta.copy()
        down = theta.copy()
        up[j] += steps[j]
        down[j] -= steps[j]
        # the actual spacing may differ from 2h after rounding
        h2 = up[j] - down[j]
        f_up = system.sum_psi(up)
        f_down = system.sum_psi(down)
        if not (np.all(np.isfinite(f_up)) and np.all(np.isfinite(f_down))):
            raise NonFiniteEvaluation(f"non-finite estimating function while perturbing {system.names[j]}")
        jac[:, j] = (f_up - f_down) / h2
    return jac


def bread(system: EstimatingSystem, theta_hat, config: SolveConfig = None) -> np.ndarray:
    return -numerical_jacobian(system, theta_hat, config) / system.n


def meat(system: EstimatingSystem, theta_hat) -> np.ndarray:
    values = system.evaluate(theta_hat)
    f = values @ values.T / system.n
    return (f + f.T) / 2


def sandwich_variance(bread_matrix, meat_matrix, n: int, rcond_threshold: float = 1e-12) -> SandwichResult:
    b = np.atleast_2d(np.asarray(bread_matrix, dtype=float))
    f = np.atleast_2d(np.asarray(meat_matrix, dtype=float))
    if not np.all(np.isfinite(b)):
        raise SingularBread("bread contains non-finite entries")
    cond = np.linalg.cond(b)
    if not np.isfinite(cond) or 1.0 / cond < rcond_threshold:
        raise SingularBread(f"bread is numerically singular (condition number {cond:.3g})")
    left = np.linalg.solve(b, f)
    cov = np.linalg.solve(b, left.T)
    cov = (cov + cov.T) / 2
    diag = np.diag(cov)
    with np.errstate(invalid="ignore"):
        se = np.where(diag >= 0, np.sqrt(np.maximum(diag, 0) / n), np.nan)
    return SandwichResult(bread=b, meat=f, covariance=cov, standard_errors=se, n=n)


def wald_ci(estimate: float, se: float, level: float = 0.95):
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if se < 0:
        raise ValueError("standard error must be non-negative")
    z = stats.norm.ppf((1 + level) / 2)
    return float(estimate - z * se), float(estimate + z * se)


def _newton_direction(jac, resid, theta, iterations):
    zero_rows = ~np.any(jac != 0, axis=1)
    zero_cols = ~np.any(jac != 0, axis=0)
    if zero_rows.any() or zero_cols.any():
        raise SingularJacobian(
            "Jacobian has identically zero rows or columns (empty score block)",
            theta=theta, iterations=iterations, residual=np.max(np.abs(resid)))
    cond = np.linalg.cond(jac)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularJacobian(f"Jacobian is singular (condition number {cond:.3g})",
                               theta=theta, iterations=iterations,
                               residual=np.max(np.abs(resid)))
    return np.linalg.solve(jac, -resid)


def solve_estimating_equations(system: EstimatingSystem, theta_init, config: SolveConfig = None) -> RootResult:
    """Damped Newton-Raphson on the mean estimating function.

    Each iteration takes a Newton step using the numerical Jacobian and halves
    it until the Euclidean norm of the mean estimating function decreases.
    Convergence is declared on the max-norm.

    Raises
    ------
    ConvergenceFailure
        If the tolerance is not met within ``config.max_iterations`` steps or
        the line search stalls.
    SingularJacobian
        If a Newton step cannot be computed.
    """
    config = config or SolveConfig()
    theta = np.array(theta_init, dtype=float)
    if theta.shape != (system.v,):
        raise ValueError(f"theta_init must have length {system.v}")
    resid = system.mean_psi(theta)
    if not np.all(np.isfinite(resid)):
        raise NonFiniteEvaluation("estimating function is non-finite at the initial value")
    iterations = 0
    while True:
        max_norm = np.max(np.abs(resid))
        if max_norm <= config.root_tolerance:
            return RootResult(theta=theta, iterations=iterations, residual=float(max_norm))
        if iterations >= config.max_iterations:
            raise ConvergenceFailure(
                f"no root within {config.max_iterations} iterations (residual {max_norm:.3g})",
                theta=theta, iterations=iterations, residual=max_norm)
        jac = numerical_jacobian(system, theta, config) / system.n
        step = _newton_direction(jac, resid, theta, iterations)
        norm = np.linalg.norm(resid)
        t = 1.0
        for _ in range(50):
            candidate = theta + t * step
            new_resid = system.mean_psi(candidate)
            if np.all(np.isfinite(new_resid)) and np.linalg.norm(new_resid) < norm:
                break
            t /= 2
        else:
            raise ConvergenceFailure(f"line search stalled at residual {max_norm:.3g}",
                                     theta=theta, iterations=iterations, residual=max_norm)
        theta, resid = candidate, new_resid
        iterations += 1


@dataclass
class MEstimate:
    theta: np.ndarray
    sandwich: SandwichResult
    iterations: int
    residual: float
    names: list = field(default_factory=list)

    @property
    def variance(self):
        """Covariance matrix of theta_hat (asymptotic covariance over n)."""
        return self.sandwich.covariance / self.sandwich.n

    @property
    def standard_errors(self):
        return self.sandwich.standard_errors

    def confidence_intervals(self, level: float = 0.95) -> np.ndarray:
        return np.array([wald_ci(t, s, level) for t, s in zip(self.theta, self.standard_errors)])


def m_estimate(system: EstimatingSystem, theta_init, config: SolveConfig = None) -> MEstimate:
    """Solve the system and attach the empirical sandwich variance."""
    config = config or SolveConfig()
    root = solve_estimating_equations(system, theta_init, config)
    b = bread(system, root.theta, config)
    f = meat(system, root.theta)
    sw = sandwich_variance(b, f, system.n)
    return MEstimate(theta=root.theta, sandwich=sw, iterations=root.iterations,
                     residual=root.residual, names=list(system.names))
