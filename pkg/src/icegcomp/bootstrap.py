"""Nonparametric bootstrap of the ICE point estimate.

Units are resampled with replacement and the point estimate is recomputed by
the sequential regressions alone (no root finding, no sandwich). Resample b
draws its indices from child b of ``SeedSequence(seed)``, so results do not
depend on how resamples are spread over worker processes.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .data import LongitudinalDataset, TreatmentPlan
from .ice import IceConfig, sequential_ice
from .mest import ConvergenceFailure


class TooManyFailures(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 500
    seed: int = 0
    workers: int = 1
    max_failure_fraction: float = 0.2

    def __post_init__(self):
        if self.resamples < 2:
            raise ValueError("at least two resamples are needed")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class BootstrapResult:
    estimate: float
    se: float
    ci: tuple
    estimates: np.ndarray
    failures: int
    resamples: int
    wall_time: float
    workers: int

    def percentile_ci(self, level: float = 0.95):
        tail = (1 - level) / 2 * 100
        lo, hi = np.percentile(self.estimates, [tail, 100 - tail])
        return float(lo), float(hi)

    def to_record(self, method: str = "bootstrap") -> dict:
        return {"method": method, "estimate": self.estimate, "se": self.se,
                "ci": list(self.ci), "resamples": self.resamples, "failures": self.failures,
                "wall_time_seconds": self.wall_time, "workers": self.workers}


def _point(dataset, plan, config, contrast_plan, contrast_config):
    mu = sequential_ice(dataset, plan, config).mu
    if contrast_plan is None:
        return mu
    return mu - sequential_ice(dataset, contrast_plan, contrast_config or config).mu


def resample_indices(n: int, seed: int, b: int) -> np.ndarray:
    """Unit indices of resample ``b``; depends only on (seed, b)."""
    child = np.random.SeedSequence(seed, spawn_key=(b,))
    return np.random.default_rng(child).integers(0, n, size=n)


def _run(args):
    dataset, plan, config, contrast_plan, contrast_config, seed, batch = args
    out = []
    for b in batch:
        sample = dataset.take(resample_indices(dataset.n, seed, b))
        try:
            out.append(_point(sample, plan, config, contrast_plan, contrast_config))
        except ConvergenceFailure:
            out.append(math.nan)
    return out


def bootstrap_estimate(dataset: LongitudinalDataset, plan: TreatmentPlan, config: IceConfig,
                       boot_config: BootstrapConfig = BootstrapConfig(), level: float = 0.95,
                       contrast_plan: Optional[TreatmentPlan] = None,
                       contrast_config: Optional[IceConfig] = None) -> BootstrapResult:
    """Bootstrap standard error and normal-approximation interval.

    With ``contrast_plan`` the bootstrapped quantity is the difference
    mu(plan) - mu(contrast_plan). Resamples whose fit fails are dropped and
    counted.

    Raises
    ------
    TooManyFailures
        If more than ``boot_config.max_failure_fraction`` of resamples fail.
    """
    start = time.perf_counter()
    point = _point(dataset, plan, config, contrast_plan, contrast_config)
    B = boot_config.resamples
    common = (dataset, plan, config, contrast_plan, contrast_config, boot_config.seed)
    if boot_config.workers == 1:
        values = _run(common + (range(B),))
    else:
        batches = np.array_split(np.arange(B), boot_config.workers * 4)
        with ProcessPoolExecutor(max_workers=boot_config.workers) as pool:
            values = [v for part in pool.map(_run, [common + (list(b),) for b in batches]) for v in part]
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values)
    failures = int((~ok).sum())
    if failures > boot_config.max_failure_fraction * B:
        raise TooManyFailures(f"{failures} of {B} bootstrap resamples failed")
    estimates = values[ok]
    se = float(np.std(estimates, ddof=1))
    z = stats.norm.ppf((1 + level) / 2)
    return BootstrapResult(estimate=float(point), se=se, ci=(float(point - z * se), float(point + z * se)),
                           estimates=estimates, failures=failures, resamples=B,
                           wall_time=time.perf_counter() - start, workers=boot_config.workers)
