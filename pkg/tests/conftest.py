"""Shared fixtures and independent oracles for the test suite."""

import itertools

import numpy as np
import pytest

from icegcomp.data import LongitudinalDataset
from icegcomp.logistic import expit

_ACCEPTANCE_LINES = []


def record_acceptance(line):
    """Remember an acceptance line so it also appears in the terminal summary."""
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def exact_truth(a):
    """Mean of Y3 under a static plan, by enumerating the binary covariates."""
    total = 0.0
    for l0, l1, l2 in itertools.product((0, 1), repeat=3):
        p1 = expit(-1 - a + l0)
        p2 = expit(-1 - 0.2 * a - a + 0.5 * l0 + l1)
        py = expit(-1.5 + 0.1 * a + 1.2 * a - 0.5 * l1 - 2 * l2)
        total += 0.5 * (p1 if l1 else 1 - p1) * (p2 if l2 else 1 - p2) * py
    return float(total)


def sm_logistic(X, y):
    """Logistic (quasi-)MLE from statsmodels; y may be fractional."""
    import statsmodels.api as sm
    fit = sm.GLM(y, X, family=sm.families.Binomial()).fit(tol=1e-13, maxiter=200)
    return np.asarray(fit.params)


def sm_sequential_ice(dataset, plan, design, stratified=False):
    """Sequential regressions written directly against statsmodels."""
    from icegcomp.data import followers_mask
    from icegcomp.design import design_matrix
    if stratified:
        design = design.without_treatment()
    target = dataset.y(dataset.tau)
    for k in reversed(range(dataset.tau)):
        rows = dataset.uncensored(k + 1)
        if stratified:
            rows = rows & followers_mask(dataset, plan, k)
        X = design_matrix(dataset, k, design)
        beta = sm_logistic(X[rows], target[rows])
        Xs = design_matrix(dataset, k, design, plan)
        target = np.where(dataset.uncensored(k), expit(np.nan_to_num(Xs) @ beta), np.nan)
    return float(np.mean(target))


def make_dataset(A, C, Y, L, ids=None):
    """Build a dataset from nested lists, NaN marking missing cells."""
    f = lambda x: np.asarray(x, dtype=float)
    return LongitudinalDataset(A=f(A), C=f(C), Y=f(Y), L={k: f(v) for k, v in L.items()}, ids=ids)


def two_period(n, seed, censor=True, events=False):
    """Random valid two-period dataset with covariate ``x``.

    With ``events`` the outcome is absorbing (once 1, stays 1).
    """
    rng = np.random.default_rng(seed)
    L0 = rng.binomial(1, 0.5, n).astype(float)
    A0 = rng.binomial(1, expit(0.3 - 0.8 * L0)).astype(float)
    C1 = rng.binomial(1, 0.1 if censor else 0.0, n).astype(float)
    Y1 = rng.binomial(1, expit(-1 + 0.5 * A0 + L0)).astype(float)
    L1 = rng.binomial(1, expit(-0.5 + A0 + L0)).astype(float)
    A1 = rng.binomial(1, expit(-0.5 + 1.5 * A0 - 0.5 * L1)).astype(float)
    C2 = np.where(C1 == 1, 1.0, rng.binomial(1, 0.1 if censor else 0.0, n))
    Y2 = rng.binomial(1, expit(-1 + 0.4 * A1 + 0.8 * L1 + 0.3 * A0)).astype(float)
    if events:
        Y2 = np.maximum(Y1, Y2)
    gone1, gone2 = C1 == 1, C2 == 1
    Y1[gone1] = np.nan
    L1[gone1] = np.nan
    A1[gone1] = np.nan
    Y2[gone2] = np.nan
    return LongitudinalDataset(A=np.column_stack([A0, A1]), C=np.column_stack([C1, C2]),
                               Y=np.column_stack([Y1, Y2]), L={"x": np.column_stack([L0, L1])})


TWO_PERIOD_TERMS = [["1", "A0", "L0_x"], ["1", "A0", "A1", "L0_x", "L1_x"]]


@pytest.fixture
def two_period_data():
    return two_period(800, 11)
