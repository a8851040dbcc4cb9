"""Three-period simulation study with informative censoring.

The data-generating mechanism draws a binary time-varying confounder L, a
binary treatment A and a binary outcome at three follow-up times. Every
potential covariate and outcome is drawn for each treatment history and the
observed value is the one selected by the realized history. Censoring depends
on the preceding treatment and is monotone.
"""

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .data import LongitudinalDataset, TreatmentPlan
from .design import DesignSpec
from .ice import IceConfig, estimate
from .logistic import expit

TAU = 3

UNSTRATIFIED_DESIGN = DesignSpec([
    ["1", "A0", "L0_L"],
    ["1", "A0", "A1", "L0_L", "L1_L"],
    ["1", "A1", "A2", "L1_L", "L2_L"],
])


def _bernoulli(rng, p):
    return (rng.random(np.shape(p)) < p).astype(float)


@dataclass
class DgmDraw:
    """Potential and observed values for n units.

    Potential values are keyed by treatment history tuples, e.g.
    ``L2[(a0, a1)]`` or ``Y3[(a0, a1, a2)]``.
    """

    L0: np.ndarray
    L1: Dict[tuple, np.ndarray]
    L2: Dict[tuple, np.ndarray]
    Y1: Dict[tuple, np.ndarray]
    Y2: Dict[tuple, np.ndarray]
    Y3: Dict[tuple, np.ndarray]
    observed: LongitudinalDataset
    uncensored: LongitudinalDataset


def _potentials(n, rng):
    L0 = _bernoulli(rng, np.full(n, 0.5))
    hist1 = [(a,) for a in (0, 1)]
    hist2 = list(itertools.product((0, 1), repeat=2))
    hist3 = list(itertools.product((0, 1), repeat=3))
    Y1 = {h: _bernoulli(rng, expit(-1.5 + 0.5 * h[0] - 2 * L0)) for h in hist1}
    L1 = {h: _bernoulli(rng, expit(-1 - h[0] + L0)) for h in hist1}
    Y2 = {h: _bernoulli(rng, expit(-1.5 + 0.1 * h[0] + 1.2 * h[1] - 0.5 * L0 - 2 * L1[h[:1]]))
          for h in hist2}
    L2 = {h: _bernoulli(rng, expit(-1 - 0.2 * h[0] - h[1] + 0.5 * L0 + L1[h[:1]])) for h in hist2}
    Y3 = {h: _bernoulli(rng, expit(-1.5 + 0.1 * h[1] + 1.2 * h[2] - 0.5 * L1[h[:1]] - 2 * L2[h[:2]]))
          for h in hist3}
    return L0, L1, L2, Y1, Y2, Y3


def _select(potential, history):
    """Pick, per unit, the potential value of its realized treatment history."""
    out = np.zeros(history.shape[0])
    for h, values in potential.items():
        match = np.all(history[:, :len(h)] == np.asarray(h), axis=1)
        out[match] = values[match]
    return out


def draw(n: int, rng: np.random.Generator) -> DgmDraw:
    """Draw potential values, observed treatments and censoring."""
    if n < 1:
        raise ValueError("n must be positive")
    L0, L1p, L2p, Y1p, Y2p, Y3p = _potentials(n, rng)
    A0 = _bernoulli(rng, expit(1 - 2 * L0))
    L1 = _select(L1p, A0[:, None])
    A1 = _bernoulli(rng, expit(-1 - 0.2 * L0 - L1 + 1.75 * A0))
    L2 = _select(L2p, np.column_stack([A0, A1]))
    A2 = _bernoulli(rng, expit(-1 - 0.2 * L1 - L2 + 1.75 * A1))
    hist = np.column_stack([A0, A1, A2])
    Y1 = _select(Y1p, hist)
    Y2 = _select(Y2p, hist)
    Y3 = _select(Y3p, hist)

    C1 = _bernoulli(rng, expit(-2.5 - 0.5 * A0))
    C2 = np.where(C1 == 1, 1.0, _bernoulli(rng, expit(-2.5 - 0.5 * A1)))
    C3 = np.where(C2 == 1, 1.0, _bernoulli(rng, expit(-2.5 - 0.5 * A2)))

    A = np.column_stack([A0, A1, A2])
    C = np.column_stack([C1, C2, C3])
    Y = np.column_stack([Y1, Y2, Y3])
    L = np.column_stack([L0, L1, L2])
    full = LongitudinalDataset(A=A, C=np.zeros_like(C), Y=Y, L={"L": L})

    # censoring at k removes Y_k and everything measured after it
    A_obs, Y_obs, L_obs = A.copy(), Y.copy(), L.copy()
    for k in range(1, TAU + 1):
        gone = C[:, k - 1] == 1
        Y_obs[gone, k - 1] = np.nan
        if k < TAU:
            A_obs[gone, k] = np.nan
            L_obs[gone, k] = np.nan
    observed = LongitudinalDataset(A=A_obs, C=C, Y=Y_obs, L={"L": L_obs})
    return DgmDraw(L0=L0, L1=L1p, L2=L2p, Y1=Y1p, Y2=Y2p, Y3=Y3p, observed=observed, uncensored=full)


def generate(n: int, seed=None) -> LongitudinalDataset:
    """Observed (censored) dataset of n units.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return draw(n, rng).observed


def true_value(plan: TreatmentPlan, truth_sample: int = 1_000_000, seed=None,
               chunk: int = 1_000_000) -> float:
    """Monte Carlo mean of Y3 with treatment forced to the plan and no censoring."""
    if plan.kind not in ("always", "never"):
        raise ValueError("the truth is defined for the always and never plans")
    a = 1 if plan.kind == "always" else 0
    rng = np.random.default_rng(seed)
    total, done = 0.0, 0
    while done < truth_sample:
        m = min(chunk, truth_sample - done)
        L0 = _bernoulli(rng, np.full(m, 0.5))
        L1 = _bernoulli(rng, expit(-1 - a + L0))
        L2 = _bernoulli(rng, expit(-1 - 0.2 * a - a + 0.5 * L0 + L1))
        Y3 = _bernoulli(rng, expit(-1.5 + 0.1 * a + 1.2 * a - 0.5 * L1 - 2 * L2))
        total += Y3.sum()
        done += m
    return float(total / truth_sample)


@dataclass(frozen=True)
class ScenarioConfig:
    n: int
    iterations: int
    plan: str = "always"
    estimator: str = "unstratified"
    seed: int = 0
    truth_sample: int = 1_000_000

    def __post_init__(self):
        if self.n < 1 or self.iterations < 1:
            raise ValueError("n and iterations must be positive")
        if self.plan not in ("always", "never"):
            raise ValueError("plan must be 'always' or 'never'")
        if self.estimator not in ("unstratified", "stratified"):
            raise ValueError("estimator must be 'unstratified' or 'stratified'")

    def ice_config(self) -> IceConfig:
        return IceConfig(design=UNSTRATIFIED_DESIGN, stratified=self.estimator == "stratified")


@dataclass
class ScenarioMetrics:
    n: int
    estimator: str
    plan: str
    bias: Optional[float]
    ese: Optional[float]
    ase: Optional[float]
    ser: Optional[float]
    coverage: Optional[float]
    failed: int
    iterations: int
    truth: float = math.nan
    estimates: Optional[np.ndarray] = field(default=None, repr=False)
    standard_errors: Optional[np.ndarray] = field(default=None, repr=False)

    COLUMNS = ("n", "estimator", "plan", "bias", "ese", "ase", "ser", "coverage", "failed", "iterations")

    def row(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS}


def _one_iteration(args):
    config, seed_seq, truth = args
    dataset = generate(config.n, seed_seq)
    res = estimate(dataset, TreatmentPlan(config.plan), config.ice_config(), check=False)
    if not res.converged:
        return None
    return res.mu_hat, res.se, res.ci[0] <= truth <= res.ci[1]


def _run_chunk(args):
    config, seeds, truth = args
    return [_one_iteration((config, s, truth)) for s in seeds]


def summarize(config: ScenarioConfig, outcomes, truth: float) -> ScenarioMetrics:
    """Aggregate per-iteration outcomes; ``None`` marks a failed iteration."""
    ok = [o for o in outcomes if o is not None]
    failed = len(outcomes) - len(ok)
    if ok:
        est = np.array([o[0] for o in ok])
        se = np.array([o[1] for o in ok])
        cover = np.array([o[2] for o in ok], dtype=float)
        bias = float(est.mean() - truth)
        ase = float(se.mean())
        coverage = float(cover.mean())
    else:
        est = se = np.array([])
        bias = ase = coverage = None
    ese = float(est.std(ddof=1)) if len(ok) >= 2 else None
    ser = ase / ese if ese not in (None, 0.0) else None
    return ScenarioMetrics(n=config.n, estimator=config.estimator, plan=config.plan, bias=bias,
                           ese=ese, ase=ase, ser=ser, coverage=coverage, failed=failed,
                           iterations=config.iterations, truth=truth, estimates=est,
                           standard_errors=se)


def run_study(config: ScenarioConfig, workers: int = 1, truth: Optional[float] = None) -> ScenarioMetrics:
    """Repeat generate -> estimate and compute bias, ESE, ASE, SER, coverage and failures.

    Iteration i draws from the i-th child of ``SeedSequence(config.seed)``, so
    the result does not depend on ``workers``. Failed iterations are counted
    and excluded from every other metric.
    """
    root = np.random.SeedSequence(config.seed)
    truth_seed, iter_seed = root.spawn(2)
    if truth is None:
        truth = true_value(TreatmentPlan(config.plan), config.truth_sample, truth_seed)
    seeds = iter_seed.spawn(config.iterations)
    if workers <= 1:
        outcomes = [_one_iteration((config, s, truth)) for s in seeds]
    else:
        size = math.ceil(len(seeds) / (4 * workers))
        chunks = [seeds[i:i + size] for i in range(0, len(seeds), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = [o for part in pool.map(_run_chunk, [(config, c, truth) for c in chunks]) for o in part]
    return summarize(config, outcomes, truth)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(round(value, 12))
    return str(value)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ScenarioMetrics.COLUMNS)
    for m in rows:
        writer.writerow([_cell(v) for v in m.row().values()])
    return buf.getvalue()


def metrics_json(rows, meta: Optional[dict] = None) -> str:
    payload = {"rows": [m.row() for m in rows]}
    if meta is not None:
        payload = {**meta, **payload}
    return json.dumps(payload, indent=2, sort_keys=False) + "\n"
