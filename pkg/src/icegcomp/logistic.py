"""Logistic and fractional-logistic regression by iteratively reweighted least squares."""

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.optimize import linprog

from .mest import ConvergenceFailure, SingularJacobian


class RankDeficientDesign(SingularJacobian):
    """The rows entering a fit do not identify all coefficients."""


def expit(x):
    """Inverse logit, 1 / (1 + exp(-x)); stable for large |x|."""
    return special.expit(x)


def logit(p):
    return special.logit(p)


@dataclass
class LogisticFit:
    beta: np.ndarray
    iterations: int
    separated: bool


def detect_separation(X, y) -> bool:
    """Linear-programming check for (quasi-)complete separation.

    The quasi-likelihood has no finite maximizer when some direction b gives
    x'b >= 0 for every y = 1, x'b <= 0 for every y = 0 and x'b = 0 for every
    0 < y < 1, with at least one strict inequality.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    boundary = (y == 0) | (y == 1)
    if not boundary.any():
        return False
    sign = np.where(y[boundary] == 1, 1.0, -1.0)
    M = sign[:, None] * X[boundary]
    interior = X[~boundary]
    res = linprog(
        c=-M.sum(axis=0),
        A_ub=-M, b_ub=np.zeros(M.shape[0]),
        A_eq=interior if interior.size else None,
        b_eq=np.zeros(interior.shape[0]) if interior.size else None,
        bounds=[(-1, 1)] * X.shape[1], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-8 * max(1.0, np.abs(M).sum()))


def _quasi_loglik(eta, y, w):
    # y*eta - log(1 + e^eta), written to avoid overflow
    return np.sum(w * (y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X, y, weights=None, tol=1e-11, max_iter=100, scale=None, check_separation=True) -> LogisticFit:
    """Maximize the (fractional) logistic quasi-likelihood.

    Parameters
    ----------
    X : ndarray (n, p)
    y : ndarray (n,)
        Outcomes in [0, 1]; fractional values are allowed.
    weights : ndarray (n,), optional
        Non-negative case weights; rows with zero weight are ignored, so their
        X and y may hold NaN.
    tol : float
        Stop once max |sum_i w_i (y_i - p_i) x_i| / scale <= tol.
    scale : float, optional
        Divisor for the score; defaults to the number of rows.

    Raises
    ------
    RankDeficientDesign
        If the weighted rows do not have full column rank (including the case
        of no rows at all).
    ConvergenceFailure
        If the tolerance is not reached in ``max_iter`` iterations.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    Xk, yk, wk = X[keep], y[keep], w[keep]
    if Xk.shape[0] == 0:
        raise RankDeficientDesign("no observations enter the model")
    if np.linalg.matrix_rank(Xk) < p:
        raise RankDeficientDesign(f"design has rank {np.linalg.matrix_rank(Xk)} < {p} among the fitted rows")
    scale = n if scale is None else scale

    beta = np.zeros(p)
    eta = Xk @ beta
    ll = _quasi_loglik(eta, yk, wk)
    for it in range(max_iter + 1):
        mu = expit(eta)
        score = Xk.T @ (wk * (yk - mu))
        if np.max(np.abs(score)) / scale <= tol:
            separated = check_separation and detect_separation(Xk, yk)
            return LogisticFit(beta=beta, iterations=it, separated=separated)
        if it == max_iter:
            break
        info = (Xk * (wk * mu * (1 - mu))[:, None]).T @ Xk
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            eta_c = Xk @ cand
            ll_c = _quasi_loglik(eta_c, yk, wk)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        beta, eta, ll = cand, eta_c, ll_c
    raise ConvergenceFailure(f"logistic fit did not converge in {max_iter} iterations", theta=beta,
                             iterations=max_iter)
