"""Columnar data tables and their CSV encoding.

Matrix-valued columns are written as ``name[1] ... name[J]`` header groups.
Non-numeric columns become factors with sorted levels.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np

__all__ = ["DataTable", "Factor", "read_csv", "write_csv"]

_MATRIX_COL = re.compile(r"^(?P<name>.+)\[(?P<j>[0-9]+)\]$")
_MISSING = {"", "NA", "na", "NaN", "nan", "null", "NULL"}
_BOOL = {"TRUE": 1.0, "True": 1.0, "true": 1.0, "FALSE": 0.0, "False": 0.0, "false": 0.0}


@dataclass(frozen=True)
class Factor:
    """Categorical column: integer codes into ``levels`` (-1 marks missing)."""

    codes: np.ndarray
    levels: tuple[str, ...]

    @classmethod
    def from_values(cls, values, levels=None) -> "Factor":
        vals = [None if v is None or (isinstance(v, float) and np.isnan(v)) else str(v)
                for v in values]
        if levels is None:
            levels = sorted({v for v in vals if v is not None})
        lookup = {lv: i for i, lv in enumerate(levels)}
        codes = np.array([lookup.get(v, -1) if v is not None else -1 for v in vals], dtype=int)
        return cls(codes, tuple(levels))

    def __len__(self) -> int:
        return self.codes.size

    @property
    def values(self) -> list[str | None]:
        return [self.levels[c] if c >= 0 else None for c in self.codes]

    def take(self, rows) -> "Factor":
        return Factor(self.codes[rows], self.levels)


class DataTable:
    """Named columns of equal length: 1-d numeric arrays, factors, or 2-d matrices."""

    def __init__(self, columns: dict):
        self.columns = {}
        n = None
        for name, col in columns.items():
            col = self._coerce(col)
            m = len(col) if isinstance(col, Factor) else col.shape[0]
            if n is None:
                n = m
            elif m != n:
                raise ValueError(f"column {name!r} has {m} rows, expected {n}")
            self.columns[name] = col
        self.n = 0 if n is None else n

    @staticmethod
    def _coerce(col):
        if isinstance(col, Factor):
            return col
        arr = np.asarray(col)
        if arr.dtype.kind in "biuf":
            arr = arr.astype(float)
            if arr.ndim > 2:
                raise ValueError("columns must be 1-d or 2-d")
            return arr
        return Factor.from_values(arr.ravel())

    def __contains__(self, name) -> bool:
        return name in self.columns

    def __getitem__(self, name):
        return self.columns[name]

    def __len__(self) -> int:
        return self.n

    def names(self) -> list[str]:
        return list(self.columns)

    def kind(self, name) -> str:
        col = self.columns[name]
        if isinstance(col, Factor):
            return "factor"
        return "matrix" if col.ndim == 2 else "numeric"

    def schema(self) -> dict:
        out = {}
        for name, col in self.columns.items():
            shape = (len(col),) if isinstance(col, Factor) else col.shape
            out[name] = (self.kind(name), shape)
        return out

    def missing(self, name) -> np.ndarray:
        col = self.columns[name]
        if isinstance(col, Factor):
            return col.codes < 0
        if col.ndim == 2:
            return np.any(~np.isfinite(col), axis=1)
        return ~np.isfinite(col)

    def take(self, rows) -> "DataTable":
        rows = np.asarray(rows)
        return DataTable({k: (v.take(rows) if isinstance(v, Factor) else v[rows])
                          for k, v in self.columns.items()})

    def with_column(self, name, col) -> "DataTable":
        cols = dict(self.columns)
        cols[name] = col
        return DataTable(cols)


def _parse_cell(s: str):
    s = s.strip()
    if s in _MISSING:
        return np.nan
    if s in _BOOL:
        return _BOOL[s]
    return float(s)


def read_csv(path, factors=()) -> DataTable:
    """Read a CSV with a header row into a :class:`DataTable`.

    ``factors`` forces the named columns to be treated as factors.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows, linenos = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append(row)
            linenos.append(lineno)
    raw = list(zip(*rows)) if rows else [() for _ in header]

    cols: dict = {}
    groups: dict[str, dict[int, int]] = {}
    order: list[str] = []
    for idx, name in enumerate(header):
        m = _MATRIX_COL.match(name)
        if m:
            g = m.group("name")
            if g not in groups:
                groups[g] = {}
                order.append(g)
            groups[g][int(m.group("j"))] = idx
            continue
        order.append(name)
        cells = raw[idx]
        if name in factors:
            cols[name] = Factor.from_values([None if c.strip() in _MISSING else c.strip()
                                             for c in cells])
            continue
        parsed, bad = [], []
        for i, c in enumerate(cells):
            try:
                parsed.append(_parse_cell(c))
            except ValueError:
                bad.append(i)
        if not bad:
            cols[name] = np.array(parsed, dtype=float)
            continue
        if len(bad) < sum(c.strip() not in _MISSING for c in cells):
            # mostly numeric with stray text: report the first offending line
            raise ValueError(f"{path}:{linenos[bad[0]]}: non-numeric value {cells[bad[0]]!r} "
                             f"in numeric column {name!r}")
        cols[name] = Factor.from_values([None if c.strip() in _MISSING else c.strip()
                                         for c in cells])
    for g, idxs in groups.items():
        js = sorted(idxs)
        if js != list(range(1, len(js) + 1)):
            raise ValueError(f"{path}: matrix column group {g!r} is not complete (1..J)")
        positions = [idxs[j] for j in js]
        if positions != list(range(positions[0], positions[0] + len(positions))):
            raise ValueError(f"{path}: matrix column group {g!r} is not contiguous")
        try:
            cols[g] = np.array([[_parse_cell(raw[p][i]) for p in positions]
                                for i in range(len(rows))], dtype=float).reshape(len(rows), len(js))
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric entry in matrix column {g!r}") from exc
    return DataTable({name: cols[name] for name in order})


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        return "NA" if np.isnan(v) else repr(float(v))
    return repr(float(v))


def write_csv(path, table: DataTable) -> None:
    """Write ``table`` with shortest round-trip float formatting."""
    header = []
    getters = []
    for name in table.names():
        col = table[name]
        if isinstance(col, Factor):
            header.append(name)
            vals = col.values
            getters.append(lambda i, vals=vals: ["NA" if vals[i] is None else vals[i]])
        elif col.ndim == 2:
            header.extend(f"{name}[{j + 1}]" for j in range(col.shape[1]))
            getters.append(lambda i, col=col: [_fmt(v) for v in col[i]])
        else:
            header.append(name)
            getters.append(lambda i, col=col: [_fmt(col[i])])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(table.n):
            row = []
            for g in getters:
                row.extend(g(i))
            w.writerow(row)
