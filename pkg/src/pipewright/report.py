"""Read-only aggregation over case folders, with matplotlib figures."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import pandas as pd

from .case import read_events
from .monitor import CATEGORY_NAMES, FAILURE_EVENT

REFINEMENT_STEPS = (0, 1, 2, 3)
CRASH_KINDS = ("contract-noncompliance", "syntax-error")


@dataclass
class CaseSummary:
    name: str
    success: bool
    status: str
    model_calls: int
    duration_s: float | None
    failure_categories: Counter = field(default_factory=Counter)
    # revisions used per substep whose validation succeeded, None for failed ones
    substep_revisions: list[int | None] = field(default_factory=list)
    executions: int = 0
    crashes: int = 0
    notes: list[str] = field(default_factory=list)


def summarize_case(path: Path) -> CaseSummary:
    path = Path(path)
    events, errors = read_events(path) if (path / "events.jsonl").exists() else ([], ["no events"])
    summary_file = path / "summary.json"
    info = json.loads(summary_file.read_text()) if summary_file.exists() else {}
    out = CaseSummary(path.name, bool(info.get("success")), info.get("status", "incomplete"),
                      0, info.get("duration_s"), notes=list(errors))
    for e in events:
        if e.kind == "model_call":
            out.model_calls += 1
        elif e.kind == FAILURE_EVENT:
            out.failure_categories[e.payload.get("category", "OTHER")] += 1
        elif e.kind == "validation_done":
            out.substep_revisions.append(e.payload.get("revisions") if e.payload.get("success")
                                         else None)
        elif e.kind == "execution":
            out.executions += 1
            out.crashes += e.payload.get("error_kind") in CRASH_KINDS
    return out


def refinement_curve(summaries: Sequence[CaseSummary]) -> dict[int, float]:
    """Share of validated substeps that succeeded within k revisions (cumulative)."""
    revs = [r for s in summaries for r in s.substep_revisions]
    if not revs:
        return {k: 0.0 for k in REFINEMENT_STEPS}
    return {k: sum(r is not None and r <= k for r in revs) / len(revs) for k in REFINEMENT_STEPS}


def category_histogram(summaries: Sequence[CaseSummary]) -> dict[str, int]:
    total: Counter = Counter()
    for s in summaries:
        total.update(s.failure_categories)
    return {name: total.get(name, 0) for name in CATEGORY_NAMES}


def case_table(summaries: Sequence[CaseSummary]) -> pd.DataFrame:
    return pd.DataFrame([{
        "case": s.name, "status": s.status, "passed": s.success, "model_calls": s.model_calls,
        "duration_s": s.duration_s, "failures": sum(s.failure_categories.values()),
        "crash_rate": s.crashes / s.executions if s.executions else 0.0,
    } for s in summaries], columns=["case", "status", "passed", "model_calls", "duration_s",
                                    "failures", "crash_rate"])


def aggregate(summaries: Sequence[CaseSummary]) -> dict:
    n = len(summaries)
    table = case_table(summaries)
    executions = sum(s.executions for s in summaries)
    return {
        "cases": n,
        "pass_rate": float(table["passed"].mean()) if n else 0.0,
        "avg_model_calls": float(table["model_calls"].mean()) if n else 0.0,
        "avg_duration_s": float(table["duration_s"].dropna().mean()) if table["duration_s"].notna().any() else None,
        "crash_rate": sum(s.crashes for s in summaries) / executions if executions else 0.0,
    }


def render_figures(summaries: Sequence[CaseSummary], directory: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory.mkdir(parents=True, exist_ok=True)
    hist = category_histogram(summaries)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(list(hist), list(hist.values()), color="#4a6fa5")
    ax.set_ylabel("failed attempts")
    ax.set_title("Failure categories")
    ax.tick_params(axis="x", labelrotation=60, labelsize=8)
    fig.tight_layout()
    hist_path = directory / "failure_categories.png"
    fig.savefig(hist_path, dpi=120)
    plt.close(fig)

    curve = refinement_curve(summaries)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(["first", "+1", "+2", "+3"], [100 * curve[k] for k in REFINEMENT_STEPS], marker="o")
    ax.set_ylim(0, 100)
    ax.set_ylabel("substeps validated (%)")
    ax.set_title("Refinement success")
    fig.tight_layout()
    curve_path = directory / "refinement_curve.png"
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    return [hist_path, curve_path]
