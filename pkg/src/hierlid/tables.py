"""Delimited-table formats and record validation.

All tables are UTF-8 CSV with a header row. Loading returns a
:class:`pandas.DataFrame` whose row order matches the file; every schema
invariant is checked and failures name the file line that broke them.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from .exceptions import (
    ColumnTypeError,
    InputFileError,
    InvariantViolation,
    MissingColumn,
    OrphanTree,
)

SPECIES = ("pine", "spruce", "deciduous")
PHOTON_CLASSES = ("ground", "canopy", "top_of_canopy", "noise")
PLOT_RADII_M = (5.64, 9.00, 12.62)
SUBCELLS_PER_SEGMENT = 6

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # id | float | int | bool | str
    check: Callable[[object], str | None] | None = None


@dataclass(frozen=True)
class TableSchema:
    """Fixed leading columns plus, when ``metrics`` is set, any number of
    trailing real-valued predictor columns."""

    name: str
    columns: tuple[Column, ...]
    metrics: bool = False
    unique: str | None = None
    table_checks: tuple[Callable[[pd.DataFrame], None], ...] = field(default=())

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def metric_columns(self, df: pd.DataFrame) -> list[str]:
        fixed = set(self.names)
        return [c for c in df.columns if c not in fixed]


def _in_range(lo, hi, lo_open=False, what=""):
    def check(v):
        bad = (v <= lo) if lo_open else (v < lo)
        if bad or v > hi:
            left = "(" if lo_open else "["
            return f"{what or 'value'} {v} outside {left}{lo}, {hi}]"
        return None

    return check


def _one_of(options):
    def check(v):
        return None if v in options else f"{v!r} not one of {options}"

    return check


def _positive(v):
    return None if v > 0 else f"value {v} must be positive"


def _nonempty(v):
    return None if v != "" else "empty identifier"


def _six_subcells(df: pd.DataFrame) -> None:
    counts = df.groupby("segment_id", sort=False).size()
    bad = counts[counts != SUBCELLS_PER_SEGMENT]
    if len(bad):
        seg = bad.index[0]
        line = int(np.flatnonzero(df["segment_id"].to_numpy() == seg)[0]) + 2
        raise InvariantViolation(
            line, f"segment {seg!r} has {bad.iloc[0]} subcells, expected {SUBCELLS_PER_SEGMENT}"
        )


TREES = TableSchema(
    "trees",
    (
        Column("tree_id", "id", _nonempty),
        Column("plot_id", "id", _nonempty),
        Column("dbh_cm", "float", _in_range(5.0, 200.0, what="dbh_cm")),
        Column("height_m", "float", _in_range(1.3, 60.0, lo_open=True, what="height_m")),
        Column("species", "str", _one_of(SPECIES)),
    ),
    unique="tree_id",
)

PLOTS = TableSchema(
    "plots",
    (
        Column("plot_id", "id", _nonempty),
        Column("area_ha", "float", _positive),
        Column("x", "float"),
        Column("y", "float"),
    ),
    metrics=True,
    unique="plot_id",
)

SUBCELLS = TableSchema(
    "subcells",
    (Column("subcell_id", "id", _nonempty), Column("segment_id", "id", _nonempty)),
    metrics=True,
    unique="subcell_id",
    table_checks=(_six_subcells,),
)

SEGMENTS = TableSchema(
    "segments",
    (
        Column("segment_id", "id", _nonempty),
        Column("track_id", "id", _nonempty),
        Column("n_photons", "int", lambda v: None if v >= 0 else "negative photon count"),
        Column("high_conf_fraction", "float", _in_range(0.0, 1.0, what="high_conf_fraction")),
        Column("forested", "bool"),
    ),
    metrics=True,
    unique="segment_id",
)

PHOTONS = TableSchema(
    "photons",
    (
        Column("track_id", "id", _nonempty),
        Column("along_m", "float"),
        Column("height_m", "float"),
        Column("cls", "str", _one_of(PHOTON_CLASSES)),
        Column("high_confidence", "bool"),
    ),
)

PIXELS = TableSchema("pixels", (Column("pixel_id", "id", _nonempty),), metrics=True, unique="pixel_id")

SCHEMAS = {s.name: s for s in (TREES, PLOTS, SUBCELLS, SEGMENTS, PHOTONS, PIXELS)}


def _parse(kind: str, text: str, line: int, col: str):
    if kind in ("id", "str"):
        return text
    try:
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise InvariantViolation(line, f"column {col!r} is not finite")
            return value
        if kind == "int":
            return int(text)
        if kind == "bool":
            low = text.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
    except ValueError:
        raise ColumnTypeError(line, col, text) from None
    raise ValueError(f"unknown column kind {kind!r}")


_DTYPES = {"id": object, "str": object, "float": np.float64, "int": np.int64, "bool": bool}


def read_table(text: str, schema: TableSchema, *, strict_radii: bool = False) -> pd.DataFrame:
    """Parse and validate CSV ``text`` against ``schema``."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn(f"{schema.name}: empty file, expected header {schema.names}") from None
    if len(set(header)) != len(header):
        raise InvariantViolation(1, "duplicate column names in header")
    for name in schema.names:
        if name not in header:
            raise MissingColumn(f"{schema.name}: missing column {name!r}")
    extra = [h for h in header if h not in schema.names]
    if extra and not schema.metrics:
        raise InvariantViolation(1, f"unexpected columns {extra}")

    kinds = {c.name: c.kind for c in schema.columns}
    checks = {c.name: c.check for c in schema.columns if c.check is not None}
    kinds.update({name: "float" for name in extra})
    order = schema.names + extra
    idx = [header.index(name) for name in order]

    columns: dict[str, list] = {name: [] for name in order}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InvariantViolation(lineno, f"expected {len(header)} fields, found {len(row)}")
        for name, i in zip(order, idx):
            value = _parse(kinds[name], row[i], lineno, name)
            check = checks.get(name)
            if check is not None:
                problem = check(value)
                if problem:
                    raise InvariantViolation(lineno, problem)
            columns[name].append(value)

    df = pd.DataFrame({name: pd.Series(vals, dtype=_DTYPES[kinds[name]]) for name, vals in columns.items()})
    if schema.unique is not None:
        dup = df[schema.unique].duplicated().to_numpy()
        if dup.any():
            first = int(np.flatnonzero(dup)[0])
            raise InvariantViolation(first + 2, f"duplicate {schema.unique} {df[schema.unique].iloc[first]!r}")
    for check in schema.table_checks:
        check(df)
    if schema is PLOTS:
        _check_radii(df, strict_radii)
    return df


def _check_radii(plots: pd.DataFrame, strict: bool) -> None:
    allowed = np.array([math.pi * r**2 / 1e4 for r in PLOT_RADII_M])
    area = plots["area_ha"].to_numpy()
    off = np.min(np.abs(area[:, None] - allowed[None, :]), axis=1) > 1e-6
    if off.any():
        line = int(np.flatnonzero(off)[0]) + 2
        msg = f"plot area {area[line - 2]} ha does not match a standard plot radius {PLOT_RADII_M}"
        if strict:
            raise InvariantViolation(line, msg)
        warnings.warn(f"line {line}: {msg}", stacklevel=3)


def load_table(path, schema: TableSchema | str, *, strict_radii: bool = False) -> pd.DataFrame:
    if isinstance(schema, str):
        schema = SCHEMAS[schema]
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"cannot read {schema.name} table {path}: {exc}") from exc
    return read_table(text, schema, strict_radii=strict_radii)


def _format(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def format_table(df: pd.DataFrame, schema: TableSchema | None = None) -> str:
    """Render ``df`` as CSV text; floats use the shortest exact repr."""
    cols = list(df.columns)
    if schema is not None:
        cols = schema.names + schema.metric_columns(df)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    arrays = [df[c].to_numpy() for c in cols]
    for i in range(len(df)):
        writer.writerow([_format(a[i]) for a in arrays])
    return buf.getvalue()


def write_table(df: pd.DataFrame, path, schema: TableSchema | str | None = None) -> None:
    if isinstance(schema, str):
        schema = SCHEMAS[schema]
    try:
        Path(path).write_text(format_table(df, schema), encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"cannot write {path}: {exc}") from exc


@dataclass
class LinkReport:
    orphans: list[str]
    empty_plots: list[str]
    trees_per_plot: dict[str, int]

    @property
    def ok(self) -> bool:
        return not self.orphans


def validate_linkage(trees: pd.DataFrame, plots: pd.DataFrame, *, strict: bool = True) -> LinkReport:
    """Check that every tree points at a known plot.

    Empty plots are legal; they are listed so callers know their AGBD is 0.
    With ``strict`` (the default) the first orphan raises :class:`OrphanTree`.
    """
    known = set(plots["plot_id"])
    orphan_mask = ~trees["plot_id"].isin(known).to_numpy()
    orphans = list(trees["tree_id"].to_numpy()[orphan_mask])
    if orphans and strict:
        raise OrphanTree(orphans[0], trees["plot_id"].to_numpy()[orphan_mask][0])
    counts = trees["plot_id"].value_counts()
    per_plot = {pid: int(counts.get(pid, 0)) for pid in plots["plot_id"]}
    empty = [pid for pid, n in per_plot.items() if n == 0]
    return LinkReport(orphans=orphans, empty_plots=empty, trees_per_plot=per_plot)


def metric_matrix(df: pd.DataFrame, names: Iterable[str]) -> np.ndarray:
    names = list(names)
    missing = [n for n in names if n not in df.columns]
    if missing:
        raise MissingColumn(f"missing predictor columns {missing}")
    return df[names].to_numpy(dtype=float)
