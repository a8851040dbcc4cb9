"""Wide-format longitudinal data: one row per unit, columns per time.

Time indexing follows the ordering L0 -> A0 -> C1 -> Y1 -> L1 -> A1 -> ... -> Y_tau.
Covariates and treatments exist at k = 0..tau-1, censoring indicators and
outcomes at k = 1..tau. Missing values are NaN.
"""

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """A dataset violates a structural rule.

    ``unit`` is the unit identifier, ``time`` the time index involved.
    """

    def __init__(self, rule, unit=None, time=None):
        self.rule = rule
        self.unit = unit
        self.time = time
        where = []
        if unit is not None:
            where.append(f"unit {unit}")
        if time is not None:
            where.append(f"time {time}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {rule}" if prefix else rule)


class ParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Immutable wide-format dataset.

    Attributes
    ----------
    A : ndarray (n, tau)
        ``A[:, k]`` is the treatment at time k.
    C : ndarray (n, tau)
        ``C[:, k - 1]`` is the censoring indicator at time k.
    Y : ndarray (n, tau)
        ``Y[:, k - 1]`` is the outcome at time k.
    L : dict of name -> ndarray (n, tau)
        ``L[name][:, k]`` is covariate ``name`` at time k.
    ids : ndarray (n,)
        Unit identifiers used in error messages.
    """

    A: np.ndarray
    C: np.ndarray
    Y: np.ndarray
    L: Dict[str, np.ndarray]
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        def frozen(name, arr):
            arr = np.array(arr, dtype=float)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be two-dimensional (units x times)")
            arr.setflags(write=False)
            return arr

        for name in ("A", "C", "Y"):
            object.__setattr__(self, name, frozen(name, getattr(self, name)))
        object.__setattr__(self, "L", {k: frozen(f"L[{k}]", v) for k, v in self.L.items()})
        shapes = {self.A.shape, self.C.shape, self.Y.shape} | {v.shape for v in self.L.values()}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent array shapes {sorted(shapes)}")
        n = self.A.shape[0]
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        if ids.shape != (n,):
            raise ValueError("ids must have one entry per unit")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def tau(self) -> int:
        return self.A.shape[1]

    @property
    def covariate_names(self):
        return list(self.L)

    def a(self, k):
        return self.A[:, k]

    def c(self, k):
        return self.C[:, k - 1]

    def y(self, k):
        return self.Y[:, k - 1]

    def l(self, name, k):
        try:
            return self.L[name][:, k]
        except KeyError:
            raise KeyError(f"unknown covariate {name!r}") from None

    def uncensored(self, k) -> np.ndarray:
        """Boolean mask of units with C_k = 0 (everyone at k = 0)."""
        if k == 0:
            return np.ones(self.n, dtype=bool)
        return self.c(k) == 0

    def take(self, index) -> "LongitudinalDataset":
        index = np.asarray(index)
        return LongitudinalDataset(A=self.A[index], C=self.C[index], Y=self.Y[index],
                                   L={k: v[index] for k, v in self.L.items()},
                                   ids=self.ids[index])

    def equals(self, other) -> bool:
        same = lambda x, y: x.shape == y.shape and np.array_equal(x, y, equal_nan=True)
        return (same(self.A, other.A) and same(self.C, other.C) and same(self.Y, other.Y)
                and self.L.keys() == other.L.keys()
                and all(same(self.L[k], other.L[k]) for k in self.L))


@dataclass(frozen=True)
class TreatmentPlan:
    """Deterministic treatment plan.

    ``kind`` is one of ``always``, ``never``, ``custom`` or ``natural_course``;
    ``values`` holds the per-time assignments of a custom plan.
    """

    kind: str
    values: Optional[tuple] = None

    KINDS = ("always", "never", "custom", "natural_course")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        if self.kind == "custom":
            if not self.values:
                raise ValueError("custom plans need a value per time")
            vals = tuple(int(v) for v in self.values)
            if any(v not in (0, 1) for v in vals):
                raise ValueError("plan values must be binary")
            object.__setattr__(self, "values", vals)
        elif self.values is not None:
            raise ValueError(f"{self.kind} plans take no values")

    @classmethod
    def always(cls):
        return cls("always")

    @classmethod
    def never(cls):
        return cls("never")

    @classmethod
    def custom(cls, values):
        return cls("custom", tuple(values))

    @classmethod
    def natural_course(cls):
        return cls("natural_course")

    @classmethod
    def parse(cls, spec) -> "TreatmentPlan":
        """Build a plan from a config value: a kind name or a list of 0/1."""
        if isinstance(spec, TreatmentPlan):
            return spec
        if isinstance(spec, str):
            if spec == "custom":
                raise ValueError("custom plans are given as a list of 0/1 values")
            return cls(spec)
        return cls.custom(spec)

    @property
    def is_natural_course(self):
        return self.kind == "natural_course"

    def label(self) -> str:
        if self.kind == "custom":
            return "custom(" + ",".join(map(str, self.values)) + ")"
        return self.kind

    def assignments(self, dataset: LongitudinalDataset) -> np.ndarray:
        """(n, tau) matrix of treatments imposed by the plan."""
        if self.kind == "natural_course":
            return dataset.A
        if self.kind == "custom":
            if len(self.values) != dataset.tau:
                raise ValueError(f"plan has {len(self.values)} values but data has tau={dataset.tau}")
            row = np.asarray(self.values, dtype=float)
        else:
            row = np.full(dataset.tau, 1.0 if self.kind == "always" else 0.0)
        return np.broadcast_to(row, (dataset.n, dataset.tau))


def followers_mask(dataset: LongitudinalDataset, plan: TreatmentPlan, k: int) -> np.ndarray:
    """Units whose observed treatments equal the plan at every time 0..k.

    Units with a missing treatment (censored) before k never follow.
    """
    if plan.is_natural_course:
        return np.ones(dataset.n, dtype=bool)
    assigned = plan.assignments(dataset)
    return np.all(dataset.A[:, :k + 1] == assigned[:, :k + 1], axis=1)


def _missing(x):
    return np.isnan(x)


def validate(dataset: LongitudinalDataset) -> None:
    """Check monotone censoring, presence/missingness alignment and domains.

    Raises
    ------
    ValidationError
        Naming the first offending unit, time and rule.
    """
    ids = dataset.ids
    tau = dataset.tau

    def fail(mask, rule, time):
        i = int(np.flatnonzero(mask)[0])
        raise ValidationError(rule, unit=ids[i], time=time)

    for k in range(1, tau + 1):
        c = dataset.c(k)
        bad = _missing(c) | ((c != 0) & (c != 1))
        if bad.any():
            fail(bad, "censoring indicator must be recorded as 0 or 1", k)
        if k > 1:
            back = (dataset.c(k - 1) == 1) & (c == 0)
            if back.any():
                fail(back, "censoring is not monotone (uncensored after being censored)", k)

    for k in range(tau):
        observed = dataset.uncensored(k)
        a = dataset.a(k)
        checks = [(f"A{k}", a)] + [(f"L{k}_{name}", dataset.l(name, k)) for name in dataset.L]
        for label, values in checks:
            absent = _missing(values)
            if (observed & absent).any():
                fail(observed & absent, f"{label} is missing for an uncensored unit", k)
            if (~observed & ~absent).any():
                fail(~observed & ~absent, f"{label} is present after censoring", k)
        off = observed & (a != 0) & (a != 1)
        if off.any():
            fail(off, f"treatment A{k} must be binary", k)

    for k in range(1, tau + 1):
        observed = dataset.uncensored(k)
        y = dataset.y(k)
        absent = _missing(y)
        if (observed & absent).any():
            fail(observed & absent, f"Y{k} is missing for an uncensored unit", k)
        if (~observed & ~absent).any():
            fail(~observed & ~absent, f"Y{k} is present after censoring", k)
        off = observed & ((y < 0) | (y > 1))
        if off.any():
            fail(off, f"outcome Y{k} must lie in [0, 1]", k)


_COLUMN = re.compile(r"^(?:(A|C|Y)(\d+)|L(\d+)_(.+))$")


def canonical_columns(tau: int, covariates: Sequence[str]) -> list:
    """Column names in time order: L0_*, A0, C1, Y1, L1_*, A1, ..., C_tau, Y_tau."""
    cols = []
    for k in range(tau + 1):
        if k > 0:
            cols += [f"C{k}", f"Y{k}"]
        if k < tau:
            cols += [f"L{k}_{name}" for name in covariates] + [f"A{k}"]
    return cols


def _parse_cell(text, row, column, binary):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row=row, column=column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", row=row, column=column)
    if binary and value not in (0.0, 1.0):
        raise ParseError(f"expected 0 or 1, got {text!r}", row=row, column=column)
    return value


def load_csv(path, schema: Optional[dict] = None) -> LongitudinalDataset:
    """Read a wide-format CSV and validate it.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    schema : dict, optional
        ``tau``: number of follow-up times (inferred from the columns if
        omitted); ``id``: name of the unit identifier column (a column named
        ``id`` is used by default); ``columns``:
        mapping from canonical names (``A0``, ``L1_x``, ...) to the header
        names used in the file.

    Blank censoring cells after a unit is censored are read as 1.
    """
    schema = dict(schema or {})
    unknown = set(schema) - {"tau", "id", "columns"}
    if unknown:
        raise ValueError(f"unknown schema keys: {sorted(unknown)}")
    rename = {v: k for k, v in (schema.get("columns") or {}).items()}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", row=1) from None
        rows = [r for r in reader if r]
    id_col = schema.get("id", "id" if "id" in header else None)

    roles = {}
    for j, name in enumerate(header):
        if name == id_col:
            continue
        canon = rename.get(name, name)
        m = _COLUMN.match(canon)
        if m is None:
            raise ParseError(f"unrecognized column {name!r}", row=1, column=name)
        if m.group(1):
            roles[j] = (m.group(1), int(m.group(2)), None)
        else:
            roles[j] = ("L", int(m.group(3)), m.group(4))
    if id_col is not None and id_col not in header:
        raise ParseError(f"id column {id_col!r} not found", row=1)

    a_times = [t for kind, t, _ in roles.values() if kind == "A"]
    tau = schema.get("tau") or (max(a_times) + 1 if a_times else 0)
    if tau < 1:
        raise ParseError("cannot infer the number of follow-up times", row=1)
    names = []
    for kind, t, name in roles.values():
        if kind == "L" and name not in names:
            names.append(name)
    expected = set(canonical_columns(tau, names))
    present = {(f"L{t}_{name}" if kind == "L" else f"{kind}{t}") for kind, t, name in roles.values()}
    if present - expected:
        raise ParseError(f"columns outside 0..tau: {sorted(present - expected)}", row=1)
    if expected - present:
        raise ParseError(f"missing columns: {sorted(expected - present)}", row=1)

    n = len(rows)
    A = np.full((n, tau), np.nan)
    C = np.full((n, tau), np.nan)
    Y = np.full((n, tau), np.nan)
    L = {name: np.full((n, tau), np.nan) for name in names}
    ids = []
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=line)
        for j, text in enumerate(row):
            if header[j] == id_col:
                continue
            kind, t, name = roles[j]
            value = _parse_cell(text, line, header[j], binary=kind in ("A", "C"))
            if kind == "A":
                A[i, t] = value
            elif kind == "C":
                C[i, t - 1] = value
            elif kind == "Y":
                Y[i, t - 1] = value
            else:
                L[name][i, t] = value
        ids.append(row[header.index(id_col)] if id_col is not None else i + 1)

    # a blank censoring cell is only meaningful after censoring occurred
    for k in range(1, tau):
        fill = np.isnan(C[:, k]) & (C[:, k - 1] == 1)
        C[fill, k] = 1.0

    dataset = LongitudinalDataset(A=A, C=C, Y=Y, L=L, ids=np.asarray(ids))
    validate(dataset)
    return dataset


def _format_value(x):
    if np.isnan(x):
        return ""
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def to_csv(dataset: LongitudinalDataset, path, id_column: Optional[str] = "id") -> None:
    """Write the dataset in the canonical column order.

    Integral values are written without a decimal point; other values use the
    shortest round-tripping representation, so reloading is exact.
    """
    columns = canonical_columns(dataset.tau, dataset.covariate_names)
    getters = []
    for name in columns:
        m = _COLUMN.match(name)
        if m.group(1) == "A":
            getters.append(dataset.A[:, int(m.group(2))])
        elif m.group(1) == "C":
            getters.append(dataset.C[:, int(m.group(2)) - 1])
        elif m.group(1) == "Y":
            getters.append(dataset.Y[:, int(m.group(2)) - 1])
        else:
            getters.append(dataset.L[m.group(4)][:, int(m.group(3))])
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(([id_column] if id_column else []) + columns)
        for i in range(dataset.n):
            cells = [_format_value(col[i]) for col in getters]
            if id_column:
                cells.insert(0, str(dataset.ids[i]))
            writer.writerow(cells)
