import pytest

from pipewright.case import CaseFolder
from pipewright.model import Actor
from pipewright.monitor import CATEGORY_NAMES, FAILURE_EVENT
from pipewright.report import (aggregate, case_table, category_histogram, refinement_curve,
                               render_figures, summarize_case)


def make_case(root, success, revisions, categories=(), executions=(), calls=3):
    with CaseFolder(root, clock=lambda: 1) as case:
        for _ in range(calls):
            case.emit(Actor.ARCHITECT, "model_call", {})
        for r in revisions:
            case.emit(Actor.GROUND_AGENT, "validation_done",
                      {"success": r is not None, "revisions": r if r is not None else 3})
        for c in categories:
            case.emit(Actor.MONITOR, FAILURE_EVENT, {"category": c})
        for kind in executions:
            case.emit(Actor.GROUND_AGENT, "execution", {"error_kind": kind})
        case.write_json("summary.json", {"success": success, "status": "success" if success else "failed",
                                         "duration_s": 2.0})
    return root


@pytest.fixture
def summaries(tmp_path):
    a = make_case(tmp_path / "a", True, [0, 1], ["KEY_ERROR"], [None, "syntax-error", None, None])
    b = make_case(tmp_path / "b", False, [None, 3], ["KEY_ERROR", "MERGE_ERROR"],
                  ["contract-noncompliance", "exception"], calls=5)
    return [summarize_case(a), summarize_case(b)]


def test_case_summary(summaries):
    a, b = summaries
    assert (a.success, a.model_calls, a.substep_revisions, a.executions, a.crashes) == (
        True, 3, [0, 1], 4, 1)
    assert (b.status, b.substep_revisions, b.crashes) == ("failed", [None, 3], 1)


def test_refinement_curve(summaries):
    # revisions 0, 1, 3 and one failure: cumulative shares out of four substeps
    assert refinement_curve(summaries) == {0: 0.25, 1: 0.5, 2: 0.5, 3: 0.75}
    assert refinement_curve([]) == {0: 0.0, 1: 0.0, 2: 0.0, 3: 0.0}


def test_histogram_and_table(summaries):
    hist = category_histogram(summaries)
    assert list(hist) == list(CATEGORY_NAMES)
    assert hist["KEY_ERROR"] == 2 and hist["MERGE_ERROR"] == 1 and sum(hist.values()) == 3
    table = case_table(summaries)
    assert table["passed"].tolist() == [True, False]
    assert table["crash_rate"].tolist() == [0.25, 0.5]
    agg = aggregate(summaries)
    assert agg["pass_rate"] == 0.5 and agg["avg_model_calls"] == 4.0
    assert agg["crash_rate"] == pytest.approx(2 / 6)


def test_figures_are_png(summaries, tmp_path):
    paths = render_figures(summaries, tmp_path / "figs")
    assert [p.name for p in paths] == ["failure_categories.png", "refinement_curve.png"]
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_incomplete_case(tmp_path):
    (tmp_path / "empty").mkdir()
    s = summarize_case(tmp_path / "empty")
    assert s.status == "incomplete" and s.notes == ["no events"]
