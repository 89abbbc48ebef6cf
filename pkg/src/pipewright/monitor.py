"""Rule-based oversight after every stage execution.

Nothing here calls a model. Thresholds are compared with >= semantics, the
verdict is a pure function of the alerts, and failure text is sorted into a
fixed set of regex categories with recovery hints.
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .case import read_events
from .contracts import RowRelation

log = logging.getLogger(__name__)

FAILURE_EVENT = "failure_categorized"
# Float noise guard for boundary comparisons (e.g. 100 * 0.2 - 100 * 0.0).
_EPS = 1e-9


@dataclass(frozen=True)
class MonitorThresholds:
    revision_warn: int = 2
    revision_crit: int = 4
    row_drop_warn: float = 30.0
    row_drop_crit: float = 90.0
    row_growth_warn: float = 500.0
    null_increase_warn: float = 20.0
    wall_warn: float = 60.0
    wall_crit: float = 300.0
    cost_warn: float = 80.0
    cost_crit: float = 100.0

    def __post_init__(self) -> None:
        for warn, crit in (("revision_warn", "revision_crit"), ("row_drop_warn", "row_drop_crit"),
                           ("wall_warn", "wall_crit"), ("cost_warn", "cost_crit")):
            if getattr(self, warn) > getattr(self, crit):
                raise ValueError(f"{warn} must not exceed {crit}")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> MonitorThresholds:
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown monitor threshold(s): {sorted(unknown)}")
        return cls(**d)


class Check(str, Enum):
    REVISIONS = "revision_count"
    ROW_DROP = "row_drop"
    ROW_GROWTH = "row_growth"
    NULL_INCREASE = "null_rate_increase"
    WALL_CLOCK = "wall_clock"
    COST = "cost_vs_budget"


class AlertSeverity(str, Enum):
    WARNING = "WARNING"
    CRITICAL = "CRITICAL"


@dataclass(frozen=True)
class Alert:
    check: Check
    severity: AlertSeverity
    observed: float
    threshold: float

    def describe(self) -> str:
        return (f"{self.severity.value} {self.check.value}: observed {self.observed:g} "
                f"(threshold {self.threshold:g})")

    def to_dict(self) -> dict:
        return {"check": self.check.value, "severity": self.severity.value,
                "observed": self.observed, "threshold": self.threshold}


class Decision(str, Enum):
    CONTINUE = "CONTINUE"
    WARN = "WARN"
    PAUSE = "PAUSE"
    ABORT = "ABORT"
    RETRY = "RETRY"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    alerts: tuple[Alert, ...] = ()

    def to_dict(self) -> dict:
        return {"decision": self.decision.value, "alerts": [a.to_dict() for a in self.alerts]}

    def describe(self) -> str:
        if not self.alerts:
            return f"{self.decision.value}: no alerts"
        return f"{self.decision.value}: " + "; ".join(a.describe() for a in self.alerts)


def decide(alerts: Iterable[Alert]) -> Decision:
    alerts = list(alerts)
    critical = {a.check for a in alerts if a.severity is AlertSeverity.CRITICAL}
    if critical - {Check.REVISIONS, Check.COST}:
        return Decision.ABORT
    if Check.COST in critical:
        return Decision.PAUSE
    if Check.REVISIONS in critical:
        return Decision.RETRY
    warnings = sum(a.severity is AlertSeverity.WARNING for a in alerts)
    if warnings >= 2:
        return Decision.RETRY
    if warnings == 1:
        return Decision.WARN
    return Decision.CONTINUE


def _grade(check: Check, observed: float, warn: float | None, crit: float | None) -> Alert | None:
    observed = round(observed, 9)
    if crit is not None and observed >= crit - _EPS:
        return Alert(check, AlertSeverity.CRITICAL, observed, crit)
    if warn is not None and observed >= warn - _EPS:
        return Alert(check, AlertSeverity.WARNING, observed, warn)
    return None


def max_null_increase(before: Mapping[str, float], after: Mapping[str, float]) -> float:
    """Largest per-column rise in null rate, in percentage points."""
    shared = [c for c in after if c in before]
    if not shared:
        return 0.0
    return max(0.0, max(100.0 * (after[c] - before[c]) for c in shared))


def null_rates(df) -> dict[str, float]:
    if len(df) == 0:
        return {str(c): 0.0 for c in df.columns}
    return {str(c): float(v) for c, v in df.isna().mean().items()}


def evaluate(result=None, rows_in: int = 0, rows_out: int = 0,
             null_before: Mapping[str, float] | None = None,
             null_after: Mapping[str, float] | None = None, revisions: int = 0,
             cost_spent: float = 0.0, cost_budget: float | None = None,
             thresholds: MonitorThresholds | None = None,
             row_relation: RowRelation = RowRelation.ANY,
             elapsed_s: float | None = None) -> Verdict:
    """Apply every threshold check to one execution.

    Row checks run only for successful executions with a non-empty input.
    A contract that promises fewer rows (LESS) disables the drop checks and
    one that promises more rows (GREATER) disables the growth check.
    """
    if min(rows_in, rows_out, revisions) < 0:
        raise ValueError("counts must be non-negative")
    t = thresholds or MonitorThresholds()
    alerts: list[Alert | None] = [
        _grade(Check.REVISIONS, revisions, t.revision_warn, t.revision_crit)]
    succeeded = result is None or getattr(result, "success", True)
    if succeeded and rows_in > 0:
        if row_relation is not RowRelation.LESS and rows_out < rows_in:
            alerts.append(_grade(Check.ROW_DROP, 100.0 * (rows_in - rows_out) / rows_in,
                                 t.row_drop_warn, t.row_drop_crit))
        if row_relation is not RowRelation.GREATER and rows_out > rows_in:
            alerts.append(_grade(Check.ROW_GROWTH, 100.0 * rows_out / rows_in,
                                 t.row_growth_warn, None))
    if succeeded and null_before is not None and null_after is not None:
        alerts.append(_grade(Check.NULL_INCREASE, max_null_increase(null_before, null_after),
                             t.null_increase_warn, None))
    if elapsed_s is None:
        elapsed_s = getattr(result, "elapsed_s", 0.0) if result is not None else 0.0
    alerts.append(_grade(Check.WALL_CLOCK, elapsed_s, t.wall_warn, t.wall_crit))
    if cost_budget:
        alerts.append(_grade(Check.COST, 100.0 * cost_spent / cost_budget,
                             t.cost_warn, t.cost_crit))
    found = tuple(a for a in alerts if a is not None)
    return Verdict(decide(found), found)


# failure categories -------------------------------------------------------------

@dataclass(frozen=True)
class FailureCategory:
    name: str
    pattern: str
    hint: str
    domain_hints: tuple[str, ...] = field(default=())

    def matches(self, text: str) -> bool:
        return re.search(self.pattern, text) is not None


CATEGORIES: tuple[FailureCategory, ...] = (
    FailureCategory("TIMEOUT", r"TimeoutError|wall-clock limit|timed out",
                    "The stage ran too long. Avoid row-wise Python loops and apply(); "
                    "use vectorized pandas operations and filter early."),
    FailureCategory("MEMORY", r"MemoryError|Unable to allocate|[Oo]ut of memory",
                    "The stage ran out of memory. Avoid cross joins and large intermediate "
                    "copies; select only the needed columns before merging."),
    FailureCategory("SYNTAX_ERROR", r"SyntaxError|IndentationError|TabError|parse failure",
                    "The program does not parse. Return one complete Python function "
                    "without markdown or prose."),
    FailureCategory("PACKAGE_UNAVAILABLE",
                    r"ModuleNotFoundError|No module named|not available in the sandbox",
                    "That package is not installed. Use only pandas, numpy and the "
                    "standard library."),
    FailureCategory("IMPORT_ERROR", r"ImportError|cannot import name|import of .* is not allowed",
                    "The import is not permitted. Use the pre-imported pd, np, math, re "
                    "and datetime names."),
    FailureCategory("SENTINEL_VALUE",
                    r"(?i)sentinel|\b9999+\.9+\b|\b9\.99+e\+?32\b|fill value|missing-value code",
                    "Numeric columns contain fill values such as 9999.99 or 9.99e32. "
                    "Replace them with NaN before aggregating."),
    FailureCategory("MERGE_ERROR",
                    r"MergeError|row_growth|misaligned|many-to-many|cartesian|"
                    r"merge (produced|exploded)|duplicate (join )?keys",
                    "The join multiplied or misaligned rows. Check key uniqueness and "
                    "dtypes on both sides, and validate the merge cardinality."),
    FailureCategory("FILE_FORMAT",
                    r"ParserError|Error tokenizing|UnicodeDecodeError|EmptyDataError|"
                    r"No columns to parse|ragged rows",
                    "The table was read with the wrong layout. Check the delimiter, "
                    "header presence and encoding."),
    FailureCategory("KEY_ERROR", r"KeyError|not in index|missing_column|column .* not found",
                    "A column or key does not exist. Check the available columns "
                    "(names are case-sensitive) before indexing."),
    FailureCategory("INDEX_ERROR", r"IndexError|out of bounds|positional indexer",
                    "Positional access went past the end. Guard against empty tables "
                    "and use label-based access."),
    FailureCategory("NAME_ERROR", r"NameError|UnboundLocalError|is not defined",
                    "A name is undefined. Define every helper inside the program and "
                    "do not rely on outside variables."),
    FailureCategory("TYPE_ERROR",
                    r"TypeError|unsupported operand|not supported between|type_mismatch|"
                    r"bad-return-type",
                    "Operand types do not match. Convert columns with pd.to_numeric or "
                    "pd.to_datetime before arithmetic and comparisons."),
    FailureCategory("VALUE_ERROR",
                    r"ValueError|could not convert|invalid literal|value_breach|"
                    r"row_relation_breach",
                    "A value is out of the expected domain. Coerce with errors='coerce' "
                    "and handle the resulting nulls."),
)
OTHER = FailureCategory("OTHER", r"", "Unclassified failure. Re-read the task and contract.")
CATEGORY_NAMES = tuple(c.name for c in CATEGORIES) + (OTHER.name,)


def categorize_failure(text: str, packs: Iterable = ()) -> FailureCategory:
    """First category whose pattern matches, with hints from matching pack gotchas."""
    category = next((c for c in CATEGORIES if c.matches(text or "")), OTHER)
    extra = []
    for pack in packs:
        for gotcha in getattr(pack, "gotchas", ()):
            if category.name in getattr(gotcha, "categories", ()):
                extra.append(f"[{pack.name}] {gotcha.text}")
    return replace(category, domain_hints=tuple(dict.fromkeys(extra))) if extra else category


def category(name: str) -> FailureCategory:
    for c in CATEGORIES + (OTHER,):
        if c.name == name:
            return c
    raise KeyError(name)


# cross-run mining ---------------------------------------------------------------

@dataclass(frozen=True)
class PreemptiveWarning:
    category: str
    occurrences: int
    text: str


def mine_patterns(case_dirs: Iterable[Path], k: int = 3,
                  notes: list[str] | None = None) -> list[PreemptiveWarning]:
    """Failure categories seen at least ``k`` times across prior case folders."""
    counts: Counter = Counter()
    for case in case_dirs:
        case = Path(case)
        try:
            events, errors = read_events(case)
        except OSError as exc:
            errors, events = [str(exc)], []
        if errors:
            note = f"skipped {case}: {errors[0]}"
            log.warning(note)
            if notes is not None:
                notes.append(note)
            continue
        for e in events:
            if e.kind == FAILURE_EVENT and "category" in e.payload:
                counts[e.payload["category"]] += 1
    out = []
    for name in sorted(counts, key=lambda n: (-counts[n], n)):
        if counts[name] >= k:
            hint = category(name).hint if name in CATEGORY_NAMES else ""
            out.append(PreemptiveWarning(
                name, counts[name],
                f"Prior runs failed {counts[name]} times with {name}. {hint}".strip()))
    return out
