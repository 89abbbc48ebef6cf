"""Schema contracts for stage outputs.

A contract states which columns a stage needs, adds, keeps and drops, what
values those columns may hold, and how the output row count relates to the
input. ``validate_output`` never raises on a breach; every breach comes back
as a :class:`Violation`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import pandas as pd
import yaml
from pandas.api import types as ptypes

TYPE_CONSTRAINTS = ("any", "integer", "real", "numeric", "text", "boolean", "datetime")


class RowRelation(str, Enum):
    SAME = "SAME"
    LESS = "LESS"
    GREATER = "GREATER"
    ANY = "ANY"


class ViolationKind(str, Enum):
    MISSING_COLUMN = "missing_column"
    TYPE_MISMATCH = "type_mismatch"
    VALUE_BREACH = "value_breach"
    ROW_RELATION_BREACH = "row_relation_breach"
    REMOVED_NOT_REMOVED = "removed_not_removed"
    PRESERVED_DROPPED = "preserved_dropped"


class ViolationSeverity(str, Enum):
    WARNING = "WARNING"
    CRITICAL = "CRITICAL"


SEVERITY = {
    ViolationKind.MISSING_COLUMN: ViolationSeverity.CRITICAL,
    ViolationKind.TYPE_MISMATCH: ViolationSeverity.CRITICAL,
    ViolationKind.ROW_RELATION_BREACH: ViolationSeverity.CRITICAL,
    ViolationKind.VALUE_BREACH: ViolationSeverity.WARNING,
    ViolationKind.PRESERVED_DROPPED: ViolationSeverity.WARNING,
    ViolationKind.REMOVED_NOT_REMOVED: ViolationSeverity.WARNING,
}


@dataclass(frozen=True)
class ValueConstraint:
    """One of ``range``, ``enum``, ``pattern`` or ``unique``."""

    kind: str
    lo: float | None = None
    hi: float | None = None
    values: tuple = ()
    pattern: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("range", "enum", "pattern", "unique"):
            raise ValueError(f"unknown value constraint {self.kind!r}")
        if self.kind == "range" and self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise ValueError(f"range lo {self.lo} exceeds hi {self.hi}")

    @classmethod
    def range(cls, lo: float | None, hi: float | None) -> ValueConstraint:
        return cls("range", lo=lo, hi=hi)

    @classmethod
    def enum(cls, values) -> ValueConstraint:
        return cls("enum", values=tuple(values))

    @classmethod
    def regex(cls, pattern: str) -> ValueConstraint:
        return cls("pattern", pattern=pattern)

    @classmethod
    def unique(cls) -> ValueConstraint:
        return cls("unique")

    def to_dict(self) -> dict:
        if self.kind == "range":
            return {"range": [self.lo, self.hi]}
        if self.kind == "enum":
            return {"enum": list(self.values)}
        if self.kind == "pattern":
            return {"pattern": self.pattern}
        return {"unique": True}

    @classmethod
    def from_dict(cls, d: dict) -> ValueConstraint:
        if "range" in d:
            lo, hi = d["range"]
            return cls.range(lo, hi)
        if "enum" in d:
            return cls.enum(d["enum"])
        if "pattern" in d:
            return cls.regex(d["pattern"])
        if d.get("unique"):
            return cls.unique()
        raise ValueError(f"cannot parse value constraint {d!r}")

    def describe(self) -> str:
        if self.kind == "range":
            lo = "-inf" if self.lo is None else self.lo
            hi = "+inf" if self.hi is None else self.hi
            return f"values within [{lo}, {hi}]"
        if self.kind == "enum":
            return "values in {" + ", ".join(repr(v) for v in self.values) + "}"
        if self.kind == "pattern":
            return f"values match /{self.pattern}/"
        return "values unique"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    column: str | None
    severity: ViolationSeverity
    detail: str

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "column": self.column,
                "severity": self.severity.value, "detail": self.detail}


def _violation(kind: ViolationKind, column: str | None, detail: str) -> Violation:
    return Violation(kind, column, SEVERITY[kind], detail)


@dataclass
class SchemaContract:
    required_inputs: dict[str, str] = field(default_factory=dict)
    # Added columns may carry a type constraint; "any" when unstated.
    columns_add: dict[str, str] = field(default_factory=dict)
    columns_preserve: list[str] = field(default_factory=list)
    columns_remove: list[str] = field(default_factory=list)
    value_constraints: dict[str, list[ValueConstraint]] = field(default_factory=dict)
    row_relation: RowRelation = RowRelation.ANY
    postconditions: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not isinstance(self.columns_add, dict):
            self.columns_add = {c: "any" for c in self.columns_add}
        self.row_relation = RowRelation(self.row_relation)
        for t in list(self.required_inputs.values()) + list(self.columns_add.values()):
            if t not in TYPE_CONSTRAINTS:
                raise ValueError(f"unknown type constraint {t!r}")
        seen: dict[str, str] = {}
        for group, names in (("add", self.columns_add), ("preserve", self.columns_preserve),
                             ("remove", self.columns_remove)):
            for name in names:
                if name in seen:
                    raise ValueError(f"column {name!r} listed in both {seen[name]} and {group}")
                seen[name] = group

    @property
    def is_empty(self) -> bool:
        return not (self.required_inputs or self.columns_add or self.columns_preserve
                    or self.columns_remove or self.value_constraints or self.postconditions
                    or self.row_relation is not RowRelation.ANY)

    def output_columns(self, input_columns) -> list[str]:
        """Columns a conforming stage would emit, given its input columns."""
        removed = set(self.columns_remove)
        cols = [c for c in input_columns if c not in removed]
        cols += [c for c in self.columns_add if c not in cols]
        return cols

    def to_dict(self) -> dict:
        return {
            "required_inputs": dict(self.required_inputs),
            "columns_add": dict(self.columns_add),
            "columns_preserve": list(self.columns_preserve),
            "columns_remove": list(self.columns_remove),
            "value_constraints": {c: [v.to_dict() for v in vs]
                                  for c, vs in self.value_constraints.items()},
            "row_relation": self.row_relation.value,
            "postconditions": list(self.postconditions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SchemaContract:
        add = d.get("columns_add") or {}
        if isinstance(add, list):
            merged: dict[str, str] = {}
            for item in add:
                merged.update(item if isinstance(item, dict) else {item: "any"})
            add = merged
        return cls(
            required_inputs={str(k): str(v) for k, v in (d.get("required_inputs") or {}).items()},
            columns_add={str(k): str(v) for k, v in add.items()},
            columns_preserve=[str(c) for c in d.get("columns_preserve") or []],
            columns_remove=[str(c) for c in d.get("columns_remove") or []],
            value_constraints={
                str(c): [ValueConstraint.from_dict(v) for v in vs]
                for c, vs in (d.get("value_constraints") or {}).items()
            },
            row_relation=RowRelation(str(d.get("row_relation", "ANY")).upper()),
            postconditions=[str(p) for p in d.get("postconditions") or []],
        )


def type_matches(series: pd.Series, constraint: str) -> bool:
    dtype = series.dtype
    if constraint == "any":
        return True
    if constraint == "integer":
        return ptypes.is_integer_dtype(dtype) and not ptypes.is_bool_dtype(dtype)
    if constraint in ("real", "numeric"):
        return ptypes.is_numeric_dtype(dtype) and not ptypes.is_bool_dtype(dtype)
    if constraint == "boolean":
        return ptypes.is_bool_dtype(dtype)
    if constraint == "datetime":
        return ptypes.is_datetime64_any_dtype(dtype)
    if constraint == "text":
        return ptypes.is_object_dtype(dtype) or ptypes.is_string_dtype(dtype)
    raise ValueError(f"unknown type constraint {constraint!r}")


def _value_breaches(column: str, series: pd.Series, constraint: ValueConstraint) -> str | None:
    values = series.dropna()
    if constraint.kind == "range":
        numeric = pd.to_numeric(values, errors="coerce")
        bad = numeric.isna()
        if constraint.lo is not None:
            bad |= numeric < constraint.lo
        if constraint.hi is not None:
            bad |= numeric > constraint.hi
        n = int(bad.sum())
        return f"{n} value(s) outside [{constraint.lo}, {constraint.hi}]" if n else None
    if constraint.kind == "enum":
        allowed = set(constraint.values)
        bad = [v for v in values.tolist() if v not in allowed]
        return f"{len(bad)} value(s) outside enum, e.g. {bad[0]!r}" if bad else None
    if constraint.kind == "pattern":
        rx = re.compile(constraint.pattern)
        bad = [v for v in values.tolist() if not rx.fullmatch(str(v))]
        return f"{len(bad)} value(s) do not match /{constraint.pattern}/" if bad else None
    dupes = int(values.duplicated().sum())
    return f"{dupes} duplicate value(s)" if dupes else None


def validate_output(contract: SchemaContract, input_row_count: int, output_table: pd.DataFrame,
                    input_table: pd.DataFrame | None = None) -> list[Violation]:
    """Check ``output_table`` against every clause of ``contract``.

    ``input_table`` is optional; when given, the required input columns are
    checked on it as well.
    """
    found: list[Violation] = []
    out_cols = set(output_table.columns)
    mistyped: set[str] = set()

    if input_table is not None:
        for col, tc in contract.required_inputs.items():
            if col not in input_table.columns:
                found.append(_violation(ViolationKind.MISSING_COLUMN, col,
                                        f"required input column {col!r} is absent"))
            elif not type_matches(input_table[col], tc):
                found.append(_violation(ViolationKind.TYPE_MISMATCH, col,
                                        f"input column {col!r} has dtype {input_table[col].dtype}, "
                                        f"expected {tc}"))

    for col, tc in contract.columns_add.items():
        if col not in out_cols:
            found.append(_violation(ViolationKind.MISSING_COLUMN, col,
                                    f"column {col!r} should have been added"))
        elif not type_matches(output_table[col], tc):
            mistyped.add(col)
            found.append(_violation(ViolationKind.TYPE_MISMATCH, col,
                                    f"column {col!r} has dtype {output_table[col].dtype}, expected {tc}"))

    for col in contract.columns_preserve:
        if col not in out_cols:
            found.append(_violation(ViolationKind.PRESERVED_DROPPED, col,
                                    f"column {col!r} should have been preserved"))

    for col in contract.columns_remove:
        if col in out_cols:
            found.append(_violation(ViolationKind.REMOVED_NOT_REMOVED, col,
                                    f"column {col!r} should have been removed"))

    for col, constraints in contract.value_constraints.items():
        # a column of the wrong type is reported once, as a type mismatch
        if col not in out_cols or col in mistyped:
            continue
        for vc in constraints:
            detail = _value_breaches(col, output_table[col], vc)
            if detail:
                found.append(_violation(ViolationKind.VALUE_BREACH, col, detail))

    n_out = len(output_table)
    rel = contract.row_relation
    ok = {
        RowRelation.SAME: n_out == input_row_count,
        RowRelation.LESS: n_out < input_row_count,
        RowRelation.GREATER: n_out > input_row_count,
        RowRelation.ANY: True,
    }[rel]
    if not ok:
        found.append(_violation(ViolationKind.ROW_RELATION_BREACH, None,
                                f"expected output rows {rel.value} than input: "
                                f"{n_out} vs {input_row_count}"))
    return found


_RELATION_TEXT = {
    RowRelation.SAME: "exactly as many rows as the input",
    RowRelation.LESS: "strictly fewer rows than the input",
    RowRelation.GREATER: "strictly more rows than the input",
}


def render_contract(contract: SchemaContract) -> str:
    """Human-readable rendering used as a top-priority prompt block."""
    if contract.is_empty:
        return "Output contract: no constraints; the stage may return any table."
    lines = ["Output contract:"]
    for col, tc in contract.required_inputs.items():
        lines.append(f"- requires input column `{col}` ({tc})")
    for col, tc in contract.columns_add.items():
        suffix = "" if tc == "any" else f" ({tc})"
        lines.append(f"- adds column `{col}`{suffix}")
    for col in contract.columns_preserve:
        lines.append(f"- preserves column `{col}`")
    for col in contract.columns_remove:
        lines.append(f"- removes column `{col}`")
    for col, vcs in contract.value_constraints.items():
        for vc in vcs:
            lines.append(f"- column `{col}`: {vc.describe()}")
    if contract.row_relation in _RELATION_TEXT:
        lines.append(f"- returns {_RELATION_TEXT[contract.row_relation]}")
    for text in contract.postconditions:
        lines.append(f"- postcondition: {text}")
    return "\n".join(lines)


def render_violations(violations: list[Violation]) -> str:
    if not violations:
        return "No contract violations."
    lines = ["Contract violations in the previous attempt:"]
    for v in violations:
        where = f" on `{v.column}`" if v.column else ""
        lines.append(f"- [{v.severity.value}] {v.kind.value}{where}: {v.detail}")
    return "\n".join(lines)


def has_critical(violations: list[Violation]) -> bool:
    return any(v.severity is ViolationSeverity.CRITICAL for v in violations)


def dump_contract(contract: SchemaContract) -> str:
    return yaml.safe_dump(contract.to_dict(), sort_keys=False)


def load_contract(text: str) -> SchemaContract:
    data: Any = yaml.safe_load(text) or {}
    return SchemaContract.from_dict(data)
