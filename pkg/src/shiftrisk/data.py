"""Dataset ingestion, shift-condition specification, losses, and fold planning.

A Dataset is an immutable column store of float64 arrays (NaN marks a
missing cell) plus an integer population index per row, with 0 denoting the
target population.  A ShiftSpec declares how the observation vector is
decomposed into ordered component groups and, per level, which populations
share that level's conditional distribution with the target.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (LossDomainError, MissingValueError, ParameterError,
                     ParseError, SchemaError, SpecValidationError)

LOSS_FAMILIES = ("squared_error", "zero_one", "cross_entropy", "column", "difference")

CE_CLIP = 1e-12


class Dataset:
    """Immutable rectangular table with named float columns and a population index."""

    def __init__(self, columns: dict[str, np.ndarray], pop: np.ndarray):
        if not columns and pop is None:
            raise SchemaError("dataset needs at least a population index")
        self._columns = {}
        n = None
        for name, arr in columns.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim != 1:
                raise SchemaError(f"column {name!r} is not one-dimensional")
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise SchemaError(f"column {name!r} has length {arr.size}, expected {n}")
            arr = arr.copy()
            arr.setflags(write=False)
            self._columns[name] = arr
        pop = np.asarray(pop)
        if not np.all(pop == pop.astype(np.int64)):
            raise SchemaError("population index must be integer-valued")
        pop = pop.astype(np.int64)
        if n is None:
            n = pop.size
        if pop.size != n:
            raise SchemaError("population index length does not match columns")
        pop = pop.copy()
        pop.setflags(write=False)
        self._pop = pop
        self._n = n
        self._fp = None

    @property
    def n(self) -> int:
        return self._n

    @property
    def pop(self) -> np.ndarray:
        return self._pop

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._columns)

    def populations(self) -> tuple[int, ...]:
        return tuple(sorted(set(self._pop.tolist())))

    def column(self, name: str) -> np.ndarray:
        if name not in self._columns:
            raise SchemaError(f"unknown column {name!r}")
        return self._columns[name]

    def missing_mask(self, name: str) -> np.ndarray:
        return np.isnan(self.column(name))

    def rows_in(self, pops) -> np.ndarray:
        """Row indices whose population index lies in `pops`."""
        mask = np.isin(self._pop, np.asarray(sorted(pops), dtype=np.int64))
        return np.flatnonzero(mask)

    def matrix(self, features, rows) -> np.ndarray:
        """Feature matrix for the given rows; missing cells are an error."""
        rows = np.asarray(rows, dtype=np.int64)
        features = tuple(features)
        out = np.empty((rows.size, len(features)))
        for j, name in enumerate(features):
            col = self.column(name)[rows]
            bad = np.flatnonzero(np.isnan(col))
            if bad.size:
                raise MissingValueError(
                    f"missing value in column {name!r} at row {int(rows[bad[0]])}")
            out[:, j] = col
        return out

    def with_columns(self, **extra) -> "Dataset":
        cols = dict(self._columns)
        cols.update(extra)
        return Dataset(cols, self._pop)

    def fingerprint(self) -> str:
        """Stable content hash used to detect mismatched-sample comparisons."""
        if self._fp is None:
            h = hashlib.sha256()
            h.update(self._pop.tobytes())
            for name in sorted(self._columns):
                h.update(name.encode())
                h.update(self._columns[name].tobytes())
            self._fp = h.hexdigest()[:16]
        return self._fp


def load_dataset(path, pop_col: str = "A", schema=None) -> Dataset:
    """Read a CSV with a header row into a Dataset.

    Empty cells and the tokens NA/NaN (any case) become missing values.
    `schema`, when given, is the exact set of expected column names.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise SchemaError(f"{path}: duplicate column names {dupes}")
        if pop_col not in header:
            raise SchemaError(f"{path}: population column {pop_col!r} not in header")
        if schema is not None and set(header) != set(schema):
            raise SchemaError(
                f"{path}: header {header} does not match declared columns {sorted(schema)}")
        raw = {h: [] for h in header}
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {i + 1} has {len(row)} cells, "
                                 f"expected {len(header)}")
            for h, cell in zip(header, row):
                raw[h].append(cell)
    n = len(raw[pop_col])
    if n == 0:
        raise SchemaError(f"{path}: no data rows")
    columns = {}
    for h in header:
        vals = np.empty(n)
        for i, cell in enumerate(raw[h]):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan"):
                vals[i] = np.nan
                continue
            try:
                vals[i] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: unparseable cell {cell!r} at row {i + 1}, "
                    f"column {h!r}") from None
        if h == pop_col:
            if np.any(np.isnan(vals)) or np.any(vals != np.round(vals)):
                raise ParseError(f"{path}: population column {pop_col!r} must "
                                 "hold integers with no missing values")
            pop = vals.astype(np.int64)
        else:
            columns[h] = vals
    return Dataset(columns, pop)


# ---------------------------------------------------------------------------
# shift specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    """Declared dataset-shift condition.

    `components[k]` lists the columns of the (k+1)-th component group and
    `sources[k]` is the set of population labels whose k-th-level conditional
    distribution is shared with the target (including 0 itself whenever
    target data is observed).
    """

    components: tuple[tuple[str, ...], ...]
    sources: tuple[frozenset, ...]
    target_observed: bool = True

    def __post_init__(self):
        comps = tuple(tuple(c) for c in self.components)
        srcs = tuple(frozenset(int(a) for a in s) for s in self.sources)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "sources", srcs)
        if len(comps) == 0:
            raise SpecValidationError("need at least one component group")
        if len(srcs) != len(comps):
            raise SpecValidationError("sources and components must have equal length")
        for k, s in enumerate(srcs):
            if not s:
                raise SpecValidationError(f"empty source set at level {k + 1}")
            if self.target_observed and 0 not in s:
                raise SpecValidationError(
                    f"target_observed requires population 0 in the level-{k + 1} source set")

    @property
    def n_levels(self) -> int:
        return len(self.components)

    def prefix_columns(self, k: int) -> tuple[str, ...]:
        """Columns of the first k component groups."""
        out = []
        for c in self.components[:k]:
            out.extend(c)
        return tuple(out)

    @classmethod
    def with_target(cls, components, source_only_sets) -> "ShiftSpec":
        """Build from per-level source-only label sets; 0 is added to every level."""
        sources = tuple(frozenset(s) | {0} for s in source_only_sets)
        return cls(tuple(tuple(c) for c in components), sources, target_observed=True)

    @classmethod
    def from_json(cls, path) -> "ShiftSpec":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SpecValidationError(f"{path}: invalid JSON ({exc})") from None
        try:
            comps = tuple(tuple(c) for c in obj["components"])
            srcs = tuple(frozenset(s) for s in obj["sources"])
            tobs = bool(obj.get("target_observed", True))
        except (KeyError, TypeError) as exc:
            raise SpecValidationError(f"{path}: malformed shift spec ({exc})") from None
        if "K" in obj and int(obj["K"]) != len(comps):
            raise SpecValidationError(f"{path}: K does not match component count")
        return cls(comps, srcs, tobs)

    def to_dict(self) -> dict:
        return {"K": self.n_levels,
                "components": [list(c) for c in self.components],
                "sources": [sorted(s) for s in self.sources],
                "target_observed": self.target_observed}


@dataclass(frozen=True)
class ValidationReport:
    level_sizes: tuple[int, ...]
    n_target: int

    def to_dict(self) -> dict:
        return {"level_sizes": list(self.level_sizes), "n_target": self.n_target}


def validate_shift_spec(spec: ShiftSpec, data: Dataset, loss=None) -> ValidationReport:
    """Check a ShiftSpec against a Dataset; returns per-level subsample sizes.

    When `loss` is given, additionally checks that the component groups cover
    exactly the loss's columns and that no cell read by a required regression
    or loss evaluation is missing.
    """
    pops = set(data.populations())
    declared = set().union(*spec.sources)
    unknown = declared - pops
    if unknown:
        raise SpecValidationError(f"declared populations {sorted(unknown)} absent from data")
    if spec.target_observed and 0 not in pops:
        raise SpecValidationError("target_observed but no rows with population 0")
    seen: set[str] = set()
    for k, group in enumerate(spec.components):
        for col in group:
            if col not in data.names:
                raise SpecValidationError(f"component column {col!r} not in dataset")
            if col in seen:
                raise SpecValidationError(f"column {col!r} appears in two component groups")
            seen.add(col)
    if loss is not None:
        uncovered = set(loss.columns_used()) - seen
        if uncovered:
            raise SpecValidationError(
                f"loss reads columns {sorted(uncovered)} outside every component group")
        _check_missing(spec, data, loss)
    sizes = tuple(int(data.rows_in(s).size) for s in spec.sources)
    return ValidationReport(sizes, int(np.count_nonzero(data.pop == 0)))


def _check_missing(spec: ShiftSpec, data: Dataset, loss) -> None:
    """A cell may be missing only if no regression or evaluation reads it."""
    K = spec.n_levels
    for a in data.populations():
        rows = data.rows_in({a})
        needed: set[str] = set()
        for k in range(1, K + 1):
            if a in spec.sources[k - 1]:
                needed.update(spec.prefix_columns(k))
                if k == K:
                    needed.update(loss.columns_used())
        for col in needed:
            miss = np.flatnonzero(data.missing_mask(col)[rows])
            if miss.size:
                raise SpecValidationError(
                    f"column {col!r} is required for population {a} rows but is "
                    f"missing at row {int(rows[miss[0]])}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Rule producing a per-row loss.

    Families: squared_error / zero_one / cross_entropy read (outcome,
    prediction) columns; `column` reads a precomputed per-row loss;
    `difference` evaluates to `parts[0] - parts[1]` row-wise.
    """

    family: str
    outcome: str | None = None
    prediction: str | None = None
    column: str | None = None
    parts: tuple["LossSpec", "LossSpec"] | None = None

    def __post_init__(self):
        if self.family not in LOSS_FAMILIES:
            raise ParameterError(f"unknown loss family {self.family!r}")
        if self.family in ("squared_error", "zero_one", "cross_entropy"):
            if not self.outcome or not self.prediction:
                raise ParameterError(f"{self.family} loss needs outcome and prediction columns")
        elif self.family == "column":
            if not self.column:
                raise ParameterError("column loss needs a column name")
        else:
            if not self.parts or len(self.parts) != 2:
                raise ParameterError("difference loss needs exactly two parts")

    def columns_used(self) -> tuple[str, ...]:
        if self.family == "column":
            return (self.column,)
        if self.family == "difference":
            seen: list[str] = []
            for p in self.parts:
                for c in p.columns_used():
                    if c not in seen:
                        seen.append(c)
            return tuple(seen)
        return (self.outcome, self.prediction)

    def label(self) -> str:
        if self.family == "column":
            return f"column:{self.column}"
        if self.family == "difference":
            return f"difference:{self.parts[0].label()}|{self.parts[1].label()}"
        return f"{self.family}:{self.outcome}:{self.prediction}"


def evaluate_loss(loss: LossSpec, data: Dataset) -> np.ndarray:
    """Per-row loss vector; rows with missing inputs hold NaN sentinels."""
    if loss.family == "column":
        return data.column(loss.column).astype(float)
    if loss.family == "difference":
        return evaluate_loss(loss.parts[0], data) - evaluate_loss(loss.parts[1], data)
    y = data.column(loss.outcome)
    p = data.column(loss.prediction)
    if loss.family == "squared_error":
        return (y - p) ** 2
    if loss.family == "zero_one":
        out = (y != p).astype(float)
        out[np.isnan(y) | np.isnan(p)] = np.nan
        return out
    # cross-entropy
    ok = ~np.isnan(p)
    if np.any((p[ok] < 0) | (p[ok] > 1)):
        bad = np.flatnonzero(ok & ((p < 0) | (p > 1)))[0]
        raise LossDomainError(
            f"cross_entropy prediction {p[bad]!r} at row {int(bad)} lies outside [0, 1]")
    q = np.clip(p, CE_CLIP, 1 - CE_CLIP)
    return -(y * np.log(q) + (1 - y) * np.log1p(-q))


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FoldPlan:
    V: int
    assignment: np.ndarray  # per-row fold id in [0, V)
    seed: int

    def fold_rows(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == v)

    def out_rows(self, v: int) -> np.ndarray:
        """Rows outside fold v; with a single fold this is the whole sample."""
        if self.V == 1:
            return np.arange(self.assignment.size)
        return np.flatnonzero(self.assignment != v)


def make_folds(n: int, V: int, seed: int) -> FoldPlan:
    """Uniformly random partition into V folds of near-equal size.

    Deterministic in (n, V, seed) via a counter-based generator, so plans are
    reproducible across runs and thread counts.
    """
    if V < 1 or V > n:
        raise ParameterError(f"fold count V={V} must satisfy 1 <= V <= n={n}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    base, extra = divmod(n, V)
    start = 0
    for v in range(V):
        size = base + (1 if v < extra else 0)
        assignment[perm[start:start + size]] = v
        start += size
    assignment.setflags(write=False)
    return FoldPlan(V, assignment, seed)
