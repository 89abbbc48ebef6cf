"""Deterministic input profiling.

Everything here is a pure function of file bytes: no model calls, no clock,
no randomness. The natural-language summary comes from a fixed template.
"""
from __future__ import annotations

import csv
import io
import re
from collections import Counter
from datetime import datetime
from pathlib import Path

import pandas as pd

from ._loader import NULL_TOKENS, read_table
from .model import ColumnProfile, ColumnType, DataProfile, FileProfile, TaskSpec

TYPE_SAMPLE_ROWS = 1000
HEADER_PROBE_ROWS = 10
_INT_RE = re.compile(r"[+-]?\d+")
_DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}([ T]\d{2}:\d{2}(:\d{2}(\.\d+)?)?)?")
_BOOL_WORDS = {"true", "false", "yes", "no"}


class ProfilingError(Exception):
    """An input file could not be read."""


def cell_type(value: str) -> ColumnType | None:
    """Most specific type a raw cell parses as; ``None`` for nulls."""
    v = value.strip()
    if v.lower() in NULL_TOKENS:
        return None
    if _INT_RE.fullmatch(v):
        return ColumnType.INTEGER
    try:
        float(v)
        return ColumnType.REAL
    except ValueError:
        pass
    if v.lower() in _BOOL_WORDS:
        return ColumnType.BOOLEAN
    if _DATE_RE.fullmatch(v):
        try:
            datetime.fromisoformat(v)
            return ColumnType.DATETIME
        except ValueError:
            pass
    return ColumnType.TEXT


def infer_type(cells: list[str]) -> ColumnType:
    """Majority vote over non-null cells; ties resolve toward text.

    Integer and real cells vote together as "numeric"; a numeric winner is
    reported as integer only when every numeric cell is an integer.
    """
    votes: Counter = Counter()
    saw_real = False
    for cell in cells:
        t = cell_type(cell)
        if t is None:
            continue
        if t in (ColumnType.INTEGER, ColumnType.REAL):
            saw_real |= t is ColumnType.REAL
            votes["numeric"] += 1
        else:
            votes[t.value] += 1
    if not votes:
        return ColumnType.UNKNOWN
    top = max(votes.values())
    winners = [k for k, n in votes.items() if n == top]
    if len(winners) > 1:
        return ColumnType.TEXT
    if winners[0] == "numeric":
        return ColumnType.REAL if saw_real else ColumnType.INTEGER
    return ColumnType(winners[0])


def detect_delimiter(text: str) -> str:
    lines = [ln for ln in text.splitlines() if ln.strip()][:5]
    if not lines:
        return ","
    if any("\t" in ln for ln in lines):
        return "\t"
    if any("," in ln for ln in lines):
        return ","
    if all(len(ln.split()) > 1 for ln in lines):
        return "whitespace"
    return ","


def parse_rows(text: str, delimiter: str) -> list[list[str]]:
    if delimiter == "whitespace":
        return [ln.split() for ln in text.splitlines() if ln.strip()]
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    return [row for row in reader if row and row != [""]]


def _parses_under(value: str, kind: ColumnType) -> bool:
    t = cell_type(value)
    if kind is ColumnType.INTEGER:
        return t is ColumnType.INTEGER
    if kind is ColumnType.REAL:
        return t in (ColumnType.INTEGER, ColumnType.REAL)
    return False


def detect_header(rows: list[list[str]]) -> bool:
    """A file is headerless when every first-row cell parses as a number under
    the majority type of its column over rows 2-11."""
    if not rows:
        return False
    first = rows[0]
    probe = rows[1 : 1 + HEADER_PROBE_ROWS]
    if not probe:
        return not all(cell_type(c) in (ColumnType.INTEGER, ColumnType.REAL) for c in first)
    for j, cell in enumerate(first):
        majority = infer_type([r[j] for r in probe if j < len(r)])
        if majority not in (ColumnType.INTEGER, ColumnType.REAL):
            return True
        if not _parses_under(cell, majority):
            return True
    return False


def _numeric_bounds(cells: list[str], kind: ColumnType):
    if kind in (ColumnType.INTEGER, ColumnType.REAL):
        nums = []
        for c in cells:
            t = cell_type(c)
            if t in (ColumnType.INTEGER, ColumnType.REAL):
                nums.append(int(c) if kind is ColumnType.INTEGER and t is ColumnType.INTEGER
                            else float(c))
        return (min(nums), max(nums)) if nums else (None, None)
    if kind is ColumnType.DATETIME:
        stamps = sorted(c.strip() for c in cells if cell_type(c) is ColumnType.DATETIME)
        return (stamps[0], stamps[-1]) if stamps else (None, None)
    return None, None


def table_name(path: Path, taken: set[str]) -> str:
    base = re.sub(r"\W+", "_", path.stem).strip("_").lower() or "table"
    if base[0].isdigit():
        base = "t_" + base
    name, i = base, 2
    while name in taken:
        name, i = f"{base}_{i}", i + 1
    return name


def profile_file(path: Path, name: str | None = None) -> FileProfile:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ProfilingError(f"cannot read {path}: {exc}") from exc
    name = name or table_name(path, set())
    if not raw.strip():
        return FileProfile(str(path), name, 0, False, ",", (), ("empty file",))
    text = raw.decode("utf-8", errors="replace")
    delimiter = detect_delimiter(text)
    rows = parse_rows(text, delimiter)
    has_header = detect_header(rows)
    warnings: list[str] = []
    width = len(rows[0])
    if has_header:
        header = [h.strip() or f"c{j}" for j, h in enumerate(rows[0])]
        data = rows[1:]
    else:
        header = [f"c{j}" for j in range(width)]
        data = rows
    if any(len(r) != width for r in data):
        warnings.append("ragged rows: some rows have a different field count")
    n = len(data)
    columns = []
    for j, col in enumerate(header):
        cells = [r[j] if j < len(r) else "" for r in data]
        kind = infer_type(cells[:TYPE_SAMPLE_ROWS])
        non_null = [c.strip() for c in cells if cell_type(c) is not None]
        distinct = list(dict.fromkeys(non_null))
        lo, hi = _numeric_bounds(cells, kind)
        columns.append(ColumnProfile(
            name=col,
            inferred_type=kind,
            null_rate=(n - len(non_null)) / n if n else 0.0,
            distinct_count=len(distinct),
            min=lo,
            max=hi,
            sample_values=tuple(distinct[:5]),
        ))
    return FileProfile(str(path), name, n, has_header, delimiter, tuple(columns), tuple(warnings))


def summarize(files: tuple[FileProfile, ...], max_columns: int = 30) -> str:
    parts = [f"{len(files)} input file(s)."]
    for f in files:
        header = "with header" if f.has_header else "headerless"
        delim = {",": "comma-delimited", "\t": "tab-delimited"}.get(f.delimiter, "whitespace-aligned")
        parts.append(f"Table `{f.name}`: {f.row_count} rows, {len(f.columns)} columns, "
                     f"{delim}, {header}.")
        for c in f.columns[:max_columns]:
            bits = [c.inferred_type.value, f"{c.null_rate:.0%} null", f"{c.distinct_count} distinct"]
            if c.min is not None:
                bits.append(f"range {c.min} to {c.max}")
            parts.append(f"  - {c.name}: " + ", ".join(bits))
        if len(f.columns) > max_columns:
            parts.append(f"  ... and {len(f.columns) - max_columns} more columns")
        for w in f.warnings:
            parts.append(f"  warning: {w}")
    return "\n".join(parts)


def profile_inputs(task: TaskSpec) -> DataProfile:
    taken: set[str] = set()
    files = []
    for path in task.inputs:
        name = table_name(Path(path), taken)
        taken.add(name)
        files.append(profile_file(Path(path), name))
    files_t = tuple(files)
    return DataProfile(files_t, summarize(files_t))


def load_table(fp: FileProfile) -> pd.DataFrame:
    return read_table(fp.path, fp.delimiter, fp.has_header, fp.column_names, fp.column_types)


def load_inputs(profile: DataProfile) -> dict[str, pd.DataFrame]:
    return {f.name: load_table(f) for f in profile.files}


__all__ = [
    "ProfilingError", "cell_type", "infer_type", "detect_delimiter", "detect_header",
    "profile_file", "profile_inputs", "summarize", "load_table", "load_inputs",
]
