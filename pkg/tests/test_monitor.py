import json

import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipewright.contracts import RowRelation
from pipewright.gateway import call_count
from pipewright.model import Actor
from pipewright.case import CaseFolder
from pipewright.monitor import (CATEGORY_NAMES, FAILURE_EVENT, Alert, AlertSeverity, Check, Decision,
                                MonitorThresholds, categorize_failure, decide, evaluate,
                                max_null_increase, mine_patterns, null_rates)
from pipewright.packs import Registry


def checks(verdict):
    return {a.check: a.severity for a in verdict.alerts}


# thresholds at and just below the boundary ---------------------------------------

BOUNDARIES = [
    # (kwargs at threshold, kwargs just below, check, severity)
    (dict(rows_in=100, rows_out=70), dict(rows_in=100, rows_out=71), Check.ROW_DROP, AlertSeverity.WARNING),
    (dict(rows_in=100, rows_out=10), dict(rows_in=100, rows_out=11), Check.ROW_DROP, AlertSeverity.CRITICAL),
    (dict(rows_in=100, rows_out=500), dict(rows_in=100, rows_out=499), Check.ROW_GROWTH, AlertSeverity.WARNING),
    (dict(null_before={"a": 0.0}, null_after={"a": 0.20}),
     dict(null_before={"a": 0.0}, null_after={"a": 0.1999}), Check.NULL_INCREASE, AlertSeverity.WARNING),
    (dict(revisions=2), dict(revisions=1), Check.REVISIONS, AlertSeverity.WARNING),
    (dict(revisions=4), dict(revisions=3), Check.REVISIONS, AlertSeverity.CRITICAL),
    (dict(elapsed_s=60.0), dict(elapsed_s=59.99), Check.WALL_CLOCK, AlertSeverity.WARNING),
    (dict(elapsed_s=300.0), dict(elapsed_s=299.99), Check.WALL_CLOCK, AlertSeverity.CRITICAL),
    (dict(cost_spent=0.8, cost_budget=1.0), dict(cost_spent=0.799, cost_budget=1.0), Check.COST,
     AlertSeverity.WARNING),
    (dict(cost_spent=1.0, cost_budget=1.0), dict(cost_spent=0.999, cost_budget=1.0), Check.COST,
     AlertSeverity.CRITICAL),
]


@pytest.mark.parametrize("at,below,check,severity", BOUNDARIES)
def test_fires_at_threshold_not_below(at, below, check, severity):
    assert checks(evaluate(**at)).get(check) is severity
    assert checks(evaluate(**below)).get(check) is not severity


def test_defaults_match_published_table():
    t = MonitorThresholds()
    assert (t.row_drop_warn, t.row_drop_crit, t.row_growth_warn, t.null_increase_warn) == (30, 90, 500, 20)
    assert (t.revision_warn, t.revision_crit, t.wall_warn, t.wall_crit) == (2, 4, 60, 300)
    assert (t.cost_warn, t.cost_crit) == (80, 100)


def test_thresholds_validation():
    with pytest.raises(ValueError):
        MonitorThresholds(row_drop_warn=95)
    with pytest.raises(ValueError):
        MonitorThresholds.from_dict({"row_drop": 1})
    assert MonitorThresholds.from_dict({"row_growth_warn": 300}).row_growth_warn == 300


# decisions ---------------------------------------------------------------------------

def alert(check, sev=AlertSeverity.WARNING):
    return Alert(check, sev, 1.0, 1.0)


def test_decision_table():
    W, C = AlertSeverity.WARNING, AlertSeverity.CRITICAL
    assert decide([]) is Decision.CONTINUE
    assert decide([alert(Check.ROW_DROP)]) is Decision.WARN
    assert decide([alert(Check.ROW_DROP), alert(Check.NULL_INCREASE)]) is Decision.RETRY
    assert decide([alert(Check.ROW_DROP, C)]) is Decision.ABORT
    assert decide([alert(Check.WALL_CLOCK, C)]) is Decision.ABORT
    assert decide([alert(Check.COST, C), alert(Check.ROW_DROP, W)]) is Decision.PAUSE
    assert decide([alert(Check.REVISIONS, C)]) is Decision.RETRY
    assert decide([alert(Check.REVISIONS, C), alert(Check.COST, C)]) is Decision.PAUSE


def test_row_relation_disables_matching_checks():
    assert Check.ROW_DROP not in checks(evaluate(rows_in=100, rows_out=1, row_relation=RowRelation.LESS))
    assert Check.ROW_GROWTH not in checks(evaluate(rows_in=10, rows_out=1000,
                                                   row_relation=RowRelation.GREATER))
    assert Check.ROW_DROP in checks(evaluate(rows_in=100, rows_out=1, row_relation=RowRelation.SAME))


def test_failed_execution_skips_row_checks():
    class Failed:
        success = False
        elapsed_s = 0.0
    assert evaluate(Failed(), rows_in=100, rows_out=0).decision is Decision.CONTINUE


def test_null_increase_on_shared_columns():
    before = null_rates(pd.DataFrame({"a": [1, 2, None, 4], "b": [1, 2, 3, 4]}))
    after = null_rates(pd.DataFrame({"a": [1, None, None, None], "c": [None] * 4}))
    assert max_null_increase(before, after) == pytest.approx(50.0)
    assert max_null_increase({}, after) == 0.0


def test_monitor_makes_no_model_calls():
    before = call_count()
    for at, below, _, _ in BOUNDARIES:
        evaluate(**at)
        evaluate(**below)
    assert call_count() == before


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        evaluate(rows_in=-1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10_000), st.integers(0, 10_000), st.integers(0, 6), st.floats(0, 400))
def test_verdict_is_consistent_with_alerts(rows_in, rows_out, revisions, elapsed):
    v = evaluate(rows_in=rows_in, rows_out=rows_out, revisions=revisions, elapsed_s=elapsed)
    assert v.decision is decide(v.alerts)
    for a in v.alerts:
        assert a.observed >= a.threshold - 1e-9


# failure categories ----------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("TimeoutError: stage exceeded", "TIMEOUT"),
    ("MemoryError", "MEMORY"),
    ("SyntaxError: invalid syntax", "SYNTAX_ERROR"),
    ("ModuleNotFoundError: No module named 'scipy'", "PACKAGE_UNAVAILABLE"),
    ("ImportError: cannot import name 'x'", "IMPORT_ERROR"),
    ("mean is 9999.99 which looks like a fill value", "SENTINEL_VALUE"),
    ("Monitor verdict RETRY: WARNING row_growth: observed 25916", "MERGE_ERROR"),
    ("ParserError: Error tokenizing data", "FILE_FORMAT"),
    ("KeyError: 'lat'", "KEY_ERROR"),
    ("IndexError: single positional indexer is out-of-bounds", "INDEX_ERROR"),
    ("NameError: name 'foo' is not defined", "NAME_ERROR"),
    ("TypeError: unsupported operand type(s)", "TYPE_ERROR"),
    ("ValueError: could not convert string to float", "VALUE_ERROR"),
    ("something odd", "OTHER"),
])
def test_categories(text, expected):
    assert categorize_failure(text).name == expected


def test_category_names_cover_taxonomy():
    assert len(CATEGORY_NAMES) == 14 and CATEGORY_NAMES[-1] == "OTHER"


def test_domain_hints_come_from_matching_gotchas():
    astronomy = [p for p in Registry.load().packs if p.name == "astronomy"]
    cat = categorize_failure("WARNING row_growth: observed 26000", astronomy)
    assert cat.name == "MERGE_ERROR"
    assert any("no header row" in h for h in cat.domain_hints)
    assert categorize_failure("TypeError", astronomy).domain_hints == ()


# cross-run mining -------------------------------------------------------------------

def write_case(root, categories):
    with CaseFolder(root, clock=lambda: 1) as case:
        for c in categories:
            case.emit(Actor.MONITOR, FAILURE_EVENT, {"category": c})


def test_mine_patterns_threshold(tmp_path):
    write_case(tmp_path / "a", ["KEY_ERROR", "KEY_ERROR", "MERGE_ERROR"])
    write_case(tmp_path / "b", ["KEY_ERROR", "TYPE_ERROR"])
    warnings = mine_patterns([tmp_path / "a", tmp_path / "b"], k=3)
    assert [(w.category, w.occurrences) for w in warnings] == [("KEY_ERROR", 3)]
    assert "KEY_ERROR" in warnings[0].text


def test_mine_patterns_skips_corrupt_cases(tmp_path):
    write_case(tmp_path / "good", ["TIMEOUT"] * 3)
    bad = tmp_path / "bad"
    write_case(bad, ["TIMEOUT"] * 3)
    with open(bad / "events.jsonl", "a") as fh:
        fh.write("{not json\n")
    notes = []
    warnings = mine_patterns([tmp_path / "good", bad, tmp_path / "missing"], k=3, notes=notes)
    assert [(w.category, w.occurrences) for w in warnings] == [("TIMEOUT", 3)]
    assert len(notes) == 2


def test_mined_text_is_json_safe(tmp_path):
    write_case(tmp_path / "a", ["OTHER"] * 4)
    json.dumps([w.text for w in mine_patterns([tmp_path / "a"], k=1)])
