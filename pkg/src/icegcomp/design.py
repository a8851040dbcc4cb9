"""Design matrices for the sequential outcome models.

A :class:`DesignSpec` lists, for every time k = 0..tau-1, the terms of the
regressor row X_k. Terms are functions of the treatment and covariate history
up to k. Building the matrix under a treatment plan replaces every treatment
value by the plan's assignment while covariates keep their observed values.

Terms can be written as strings::

    "1"                      intercept
    "A1"                     treatment at time 1
    "L0_age"                 covariate ``age`` at time 0
    "C(L1_exercise)"         indicators for each non-reference level
    "C(L1_exercise; 1,2,3)"  indicators for the listed levels
    "rcs(L1_height; -1.6, -0.4, 0.4, 1.6)"  restricted cubic spline terms
    "A0:A1"                  product of terms (any of the above)
"""

import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import LongitudinalDataset, TreatmentPlan


class MissingColumn(KeyError):
    pass


class _View:
    """Column source for one dataset under one treatment assignment."""

    def __init__(self, dataset: LongitudinalDataset, treatments: np.ndarray):
        self.dataset = dataset
        self.treatments = treatments

    def treatment(self, t):
        return self.treatments[:, t]

    def covariate(self, name, t):
        if name not in self.dataset.L:
            raise MissingColumn(f"design references absent covariate {name!r}")
        return self.dataset.l(name, t)


class Term:
    uses_treatment = False

    def names(self) -> List[str]:
        raise NotImplementedError

    def columns(self, view: _View) -> List[np.ndarray]:
        raise NotImplementedError

    def covariates(self) -> set:
        return set()


@dataclass(frozen=True)
class Intercept(Term):
    time = 0

    def names(self):
        return ["intercept"]

    def columns(self, view):
        return [np.ones(view.dataset.n)]


@dataclass(frozen=True)
class Treatment(Term):
    time: int
    uses_treatment = True

    def names(self):
        return [f"A{self.time}"]

    def columns(self, view):
        return [view.treatment(self.time)]


@dataclass(frozen=True)
class Covariate(Term):
    name: str
    time: int

    def names(self):
        return [f"L{self.time}_{self.name}"]

    def columns(self, view):
        return [view.covariate(self.name, self.time)]

    def covariates(self):
        return {self.name}


@dataclass(frozen=True)
class Indicator(Term):
    """Disjoint indicators; the reference level is whatever is not listed."""

    name: str
    time: int
    levels: Optional[Tuple[float, ...]] = None

    def names(self):
        self._require_levels()
        return [f"L{self.time}_{self.name}=={_fmt(v)}" for v in self.levels]

    def columns(self, view):
        self._require_levels()
        x = view.covariate(self.name, self.time)
        # missing stays missing
        return [np.where(np.isnan(x), np.nan, (x == v).astype(float)) for v in self.levels]

    def covariates(self):
        return {self.name}

    def _require_levels(self):
        if self.levels is None:
            raise ValueError(f"indicator levels for {self.name!r} unresolved; call DesignSpec.resolve")

    def resolve(self, dataset):
        if self.levels is not None:
            return self
        x = dataset.l(self.name, self.time)
        observed = np.unique(x[~np.isnan(x)])
        return Indicator(self.name, self.time, tuple(float(v) for v in observed[1:]))


@dataclass(frozen=True)
class Spline(Term):
    """Restricted cubic spline basis (K - 2 nonlinear terms for K knots)."""

    name: str
    time: int
    knots: Tuple[float, ...]

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.size < 3 or np.any(np.diff(k) <= 0):
            raise ValueError("restricted cubic splines need at least 3 increasing knots")

    def names(self):
        return [f"rcs{j + 1}(L{self.time}_{self.name})" for j in range(len(self.knots) - 2)]

    def columns(self, view):
        return list(restricted_cubic_spline(view.covariate(self.name, self.time), self.knots).T)

    def covariates(self):
        return {self.name}


@dataclass(frozen=True)
class Interaction(Term):
    left: Term
    right: Term

    @property
    def uses_treatment(self):
        return self.left.uses_treatment or self.right.uses_treatment

    @property
    def time(self):
        return max(self.left.time, self.right.time)

    def names(self):
        return [f"{a}:{b}" for a in self.left.names() for b in self.right.names()]

    def columns(self, view):
        return [a * b for a in self.left.columns(view) for b in self.right.columns(view)]

    def covariates(self):
        return self.left.covariates() | self.right.covariates()

    def resolve(self, dataset):
        return Interaction(_resolve(self.left, dataset), _resolve(self.right, dataset))


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _resolve(term, dataset):
    return term.resolve(dataset) if hasattr(term, "resolve") else term


def restricted_cubic_spline(x, knots) -> np.ndarray:
    """Harrell's restricted cubic spline terms, scaled by (t_K - t_1)^2.

    Returns an array of shape (len(x), K - 2). The fitted function built from
    these terms plus a linear term is linear beyond the outer knots.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots, dtype=float)
    K = t.size
    scale = (t[-1] - t[0]) ** 2

    def cube(u):
        return np.where(np.isnan(u), np.nan, np.maximum(u, 0.0) ** 3)

    last = cube(x - t[-1])
    penult = cube(x - t[-2])
    out = np.empty(x.shape + (K - 2,))
    for j in range(K - 2):
        out[..., j] = (cube(x - t[j])
                       - penult * (t[-1] - t[j]) / (t[-1] - t[-2])
                       + last * (t[-2] - t[j]) / (t[-1] - t[-2])) / scale
    return out


_ATOM_TREAT = re.compile(r"^A(\d+)$")
_ATOM_COV = re.compile(r"^L(\d+)_(\S+)$")
_ATOM_IND = re.compile(r"^C\(\s*L(\d+)_([^;\s)]+)\s*(?:;\s*([^)]*))?\)$")
_ATOM_RCS = re.compile(r"^rcs\(\s*L(\d+)_([^;\s)]+)\s*;\s*([^)]*)\)$")


def _numbers(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValueError(f"bad number list {text!r}") from None


def parse_term(text: str) -> Term:
    text = text.strip()
    parts = _split_interaction(text)
    if len(parts) > 1:
        term = parse_term(parts[0])
        for part in parts[1:]:
            term = Interaction(term, parse_term(part))
        return term
    if text == "1":
        return Intercept()
    m = _ATOM_TREAT.match(text)
    if m:
        return Treatment(int(m.group(1)))
    m = _ATOM_IND.match(text)
    if m:
        levels = _numbers(m.group(3)) if m.group(3) else None
        return Indicator(m.group(2), int(m.group(1)), levels)
    m = _ATOM_RCS.match(text)
    if m:
        return Spline(m.group(2), int(m.group(1)), _numbers(m.group(3)))
    m = _ATOM_COV.match(text)
    if m:
        return Covariate(m.group(2), int(m.group(1)))
    raise ValueError(f"cannot parse design term {text!r}")


def _split_interaction(text):
    parts, depth, current = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == ":" and depth == 0:
            parts.append(current)
            current = ""
        else:
            current += ch
    parts.append(current)
    return [p.strip() for p in parts]


class DesignSpec:
    """Per-time lists of design terms.

    Parameters
    ----------
    terms : sequence of sequences
        ``terms[k]`` are the terms (``Term`` objects or strings) of X_k.
    """

    def __init__(self, terms: Sequence[Sequence]):
        self.terms = [[parse_term(t) if isinstance(t, str) else t for t in row] for row in terms]
        for k, row in enumerate(self.terms):
            if not row:
                raise ValueError(f"design for time {k} has no terms")
            late = [t for t in row if t.time > k]
            if late:
                raise ValueError(f"design for time {k} uses values from time {late[0].time}")

    @property
    def tau(self):
        return len(self.terms)

    def __repr__(self):
        return f"DesignSpec({self.terms!r})"

    def column_names(self, k) -> List[str]:
        return [name for term in self.terms[k] for name in term.names()]

    def n_columns(self, k) -> int:
        return len(self.column_names(k))

    def treatment_columns(self, k) -> List[int]:
        idx, pos = [], 0
        for term in self.terms[k]:
            width = len(term.names())
            if term.uses_treatment:
                idx.extend(range(pos, pos + width))
            pos += width
        return idx

    def covariates(self) -> set:
        return set().union(*(t.covariates() for row in self.terms for t in row))

    def without_treatment(self) -> "DesignSpec":
        return DesignSpec([[t for t in row if not t.uses_treatment] for row in self.terms])

    def resolve(self, dataset: LongitudinalDataset) -> "DesignSpec":
        """Fix data-dependent indicator levels against ``dataset``."""
        return DesignSpec([[_resolve(t, dataset) for t in row] for row in self.terms])


def design_matrix(dataset: LongitudinalDataset, k: int, spec: DesignSpec,
                  plan: Optional[TreatmentPlan] = None) -> np.ndarray:
    """Rows X_k (observed) or X*_k (treatments replaced by ``plan``).

    Returns an (n, p) matrix. Rows of units censored by time k contain NaN
    in covariate-derived columns.
    """
    if not 0 <= k < spec.tau:
        raise ValueError(f"time {k} outside the design (tau={spec.tau})")
    missing = spec.covariates() - set(dataset.covariate_names)
    if missing:
        raise MissingColumn(f"design references absent covariates {sorted(missing)}")
    treatments = dataset.A if plan is None else plan.assignments(dataset)
    view = _View(dataset, treatments)
    cols = [col for term in spec.terms[k] for col in term.columns(view)]
    return np.column_stack(cols).astype(float)
