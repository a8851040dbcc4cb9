"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured values so
the run log doubles as a report. Seeds are fixed and were not tuned.
"""

import time

import numpy as np
import pytest

from icegcomp.bootstrap import BootstrapConfig, bootstrap_estimate
from icegcomp.data import TreatmentPlan
from icegcomp.design import DesignSpec
from icegcomp.ice import IceConfig, build_system, estimate, estimate_contrast, sequential_ice
from icegcomp.logistic import expit
from icegcomp.mest import EstimatingSystem, m_estimate, numerical_jacobian
from icegcomp.simulation import UNSTRATIFIED_DESIGN, ScenarioConfig, generate, run_study

from conftest import TWO_PERIOD_TERMS, record_acceptance, two_period

ITERATIONS = 1000


def report(number, title, ok, detail):
    record_acceptance(f"{'PASS' if ok else 'FAIL'} criterion {number:>2} | {title} | {detail}")
    assert ok, detail


def test_criterion_01_unstratified_always_n1000():
    m = run_study(ScenarioConfig(n=1000, iterations=ITERATIONS, plan="always",
                                 estimator="unstratified", seed=101))
    ok = (abs(m.bias - (-0.004)) <= 0.01 and 0.90 <= m.ser <= 1.10
          and 0.93 <= m.coverage <= 0.97)
    report(1, "unstratified always-treat n=1000", ok,
           f"bias={m.bias:.4f} (target -0.004 +/- 0.01) ese={m.ese:.4f} ase={m.ase:.4f} "
           f"ser={m.ser:.3f} [0.90,1.10] coverage={m.coverage:.3f} [0.93,0.97] "
           f"failed={m.failed}/{ITERATIONS}")


def test_criterion_02_stratified_never_n1000():
    m = run_study(ScenarioConfig(n=1000, iterations=ITERATIONS, plan="never",
                                 estimator="stratified", seed=102))
    ok = abs(m.bias) <= 0.01 and 0.93 <= m.coverage <= 0.97 and m.failed == 0
    report(2, "stratified never-treat n=1000", ok,
           f"bias={m.bias:.4f} (|bias|<=0.01) coverage={m.coverage:.3f} [0.93,0.97] "
           f"failed={m.failed} (must be 0)")


def test_criterion_03_failure_fraction_n250():
    m = run_study(ScenarioConfig(n=250, iterations=ITERATIONS, plan="always",
                                 estimator="stratified", seed=103))
    frac = m.failed / ITERATIONS
    report(3, "stratified always-treat n=250 failures", 0.02 <= frac <= 0.10,
           f"failed={m.failed}/{ITERATIONS} fraction={frac:.3f} [0.02,0.10]")


def test_criterion_04_cold_start_matches_sequential():
    config = IceConfig(UNSTRATIFIED_DESIGN)
    plan = TreatmentPlan.always()
    worst_gap, worst_resid = 0.0, 0.0
    for seed in np.random.SeedSequence(104).spawn(100):
        d = generate(500, seed)
        system = build_system(d, plan, config)
        fit = m_estimate(system, system.cold_start())
        gap = abs(fit.theta[system.mu_index] - sequential_ice(d, plan, config).mu)
        worst_gap, worst_resid = max(worst_gap, gap), max(worst_resid, fit.residual)
    report(4, "M-estimation vs sequential regressions (100 x n=500)",
           worst_gap <= 1e-6 and worst_resid <= 1e-9,
           f"max |mu_m - mu_seq|={worst_gap:.2e} (<=1e-6) max residual={worst_resid:.2e} (<=1e-9)")


@pytest.fixture(scope="module")
def sandwich_vs_bootstrap():
    d = generate(2000, 105)
    plan, config = TreatmentPlan.always(), IceConfig(UNSTRATIFIED_DESIGN)
    t0 = time.perf_counter()
    sw = estimate(d, plan, config)
    sandwich_time = time.perf_counter() - t0
    boot = bootstrap_estimate(d, plan, config, BootstrapConfig(resamples=500, seed=105, workers=1))
    return sw, sandwich_time, boot


def test_criterion_05_sandwich_vs_bootstrap(sandwich_vs_bootstrap):
    sw, _, boot = sandwich_vs_bootstrap
    rel = abs(sw.se - boot.se) / boot.se
    gaps = [abs(a - b) for a, b in zip(sw.ci, boot.ci)]
    # "agree to 2 decimals" is read as bounds within half a unit of the second
    # decimal; equality after rounding is reported but depends on where the
    # rounding boundary happens to fall
    ok = rel <= 0.10 and max(gaps) < 0.005
    rounded_equal = [round(a, 2) == round(b, 2) for a, b in zip(sw.ci, boot.ci)]
    report(5, "sandwich vs 500-resample bootstrap (n=2000)", ok,
           f"se sandwich={sw.se:.4f} bootstrap={boot.se:.4f} rel diff={rel:.3f} (<=0.10) "
           f"ci sandwich=({sw.ci[0]:.3f}, {sw.ci[1]:.3f}) bootstrap=({boot.ci[0]:.3f}, {boot.ci[1]:.3f}) "
           f"max bound gap={max(gaps):.4f} (<0.005) equal after rounding={rounded_equal} "
           f"failures={boot.failures}")


def test_criterion_06_runtime_ordering(sandwich_vs_bootstrap):
    _, sandwich_time, boot = sandwich_vs_bootstrap
    report(6, "sandwich faster than sequential bootstrap", sandwich_time < boot.wall_time,
           f"sandwich={sandwich_time:.3f}s bootstrap(B=500, 1 worker)={boot.wall_time:.2f}s")


def test_criterion_07_sample_mean_closed_form():
    y = np.random.default_rng(107).normal(3.0, 2.0, 1000)
    system = EstimatingSystem(lambda t: (y - t[0])[None, :], n=y.size, v=1)
    se = m_estimate(system, [0.0]).standard_errors[0]
    expected = np.sqrt(np.mean((y - y.mean()) ** 2) / y.size)
    gap = abs(se - expected)
    report(7, "sample-mean sandwich SE closed form", gap <= 1e-12,
           f"se={se:.15f} closed form={expected:.15f} |diff|={gap:.1e} (<=1e-12)")


def test_criterion_08_logistic_jacobian():
    rng = np.random.default_rng(108)
    worst = 0.0
    for _ in range(50):
        n, p = rng.integers(50, 500), rng.integers(1, 6)
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
        beta = rng.normal(scale=0.7, size=p + 1)
        y = rng.binomial(1, expit(X @ beta)).astype(float)
        system = EstimatingSystem(lambda b: (X * (y - expit(X @ b))[:, None]).T, n=n, v=p + 1)
        prob = expit(X @ beta)
        hessian = -(X * (prob * (1 - prob))[:, None]).T @ X
        jac = numerical_jacobian(system, beta)
        worst = max(worst, np.max(np.abs(jac - hessian) / np.abs(hessian)))
    report(8, "numerical Jacobian vs analytic logistic Hessian (50 draws)", worst <= 1e-5,
           f"max elementwise relative error={worst:.2e} (<=1e-5)")


def test_criterion_09_survival_properties():
    design = IceConfig(DesignSpec(TWO_PERIOD_TERMS))
    survival = IceConfig(DesignSpec(TWO_PERIOD_TERMS), outcome_kind="time_to_event")
    base = two_period(1000, 109)
    event_free = base.take(np.flatnonzero(~(base.y(1) == 1)))
    equal = all(estimate(event_free, plan, design).mu_hat == estimate(event_free, plan, survival).mu_hat
                for plan in (TreatmentPlan.always(), TreatmentPlan.never()))
    events = two_period(1000, 110, events=True)
    res = estimate(events, TreatmentPlan.always(), survival)
    system = build_system(events, TreatmentPlan.always(), survival)
    pseudo = system.pseudo_outcomes(res.theta.to_vector())[1]
    carried = events.uncensored(1) & (events.y(1) == 1)
    all_one = bool(np.all(pseudo[carried] == 1.0))
    report(9, "time-to-event variant", equal and all_one and carried.any(),
           f"event-free mu identical={equal} carried-forward units={int(carried.sum())} all exactly 1={all_one}")


def test_criterion_10_stacked_contrast():
    d = generate(1000, 110)
    config = IceConfig(UNSTRATIFIED_DESIGN)
    gaps = []
    for a, b in ((TreatmentPlan.always(), TreatmentPlan.never()),
                 (TreatmentPlan.never(), TreatmentPlan.natural_course())):
        con = estimate_contrast(d, a, b, config)
        gaps.append(abs(con.mu_d - (estimate(d, a, config).mu_hat - estimate(d, b, config).mu_hat)))
    same = estimate_contrast(d, TreatmentPlan.always(), TreatmentPlan.always(), config)
    ok = max(gaps) <= 1e-6 and abs(same.mu_d) <= 1e-9
    report(10, "stacked contrast", ok,
           f"max |mu_d - (mu_a - mu_b)|={max(gaps):.2e} (<=1e-6) self-contrast mu_d={same.mu_d:.1e} (<=1e-9)")
