"""Critique loops and two-level backtracking."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Callable

from .case import CaseFolder, MissingCheckpointError
from .model import DATA_UNDERSTANDING, FailureRecord, PipelineState, Plan

REEXPAND_DIRECTIVE = ("The previous expansion of this phase failed. Do not repeat the prior "
                      "approach: choose different agent types or a different decomposition.")


class Severity(IntEnum):
    NONE = 0
    MINOR = 1
    MAJOR = 2
    CRITICAL = 3

    @classmethod
    def parse(cls, value) -> Severity:
        if isinstance(value, Severity):
            return value
        return cls[str(value).strip().upper()]


@dataclass(frozen=True)
class Issue:
    description: str
    target: str | None = None

    def to_dict(self) -> dict:
        return {"description": self.description, "target": self.target}


@dataclass(frozen=True)
class CritiqueResult:
    severity: Severity
    issues: tuple[Issue, ...] = ()

    def __post_init__(self) -> None:
        if self.severity is Severity.NONE and self.issues:
            raise ValueError("a NONE critique carries no issues")

    def to_dict(self) -> dict:
        return {"severity": self.severity.name, "issues": [i.to_dict() for i in self.issues]}


@dataclass(frozen=True)
class CritiqueLoopConfig:
    max_iterations: int = 10
    exit_severity: Severity = Severity.MINOR
    convergence_detection: bool = False
    dual_judge: bool = False

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class CritiqueOutcome:
    artifact: Any
    transcript: list[dict] = field(default_factory=list)
    critiques: int = 0
    revisions: int = 0
    final_severity: Severity | None = None
    # "accepted", "converged", "exhausted" or "error"
    exit_reason: str = "accepted"
    error: str | None = None


def critique_loop(artifact, critique_fn: Callable[[Any], CritiqueResult],
                  revise_fn: Callable[[Any, CritiqueResult], Any],
                  config: CritiqueLoopConfig | None = None) -> CritiqueOutcome:
    """Critique, and revise while severity is MAJOR or worse.

    Exits once severity drops to ``exit_severity``, when the iteration cap is
    reached, or (with convergence detection) when two consecutive critiques
    raise the same issues. No revision follows the final critique.
    """
    cfg = config or CritiqueLoopConfig()
    out = CritiqueOutcome(artifact)
    previous: tuple[Issue, ...] | None = None
    for i in range(1, cfg.max_iterations + 1):
        try:
            result = critique_fn(out.artifact)
            out.critiques += 1
            if cfg.dual_judge:
                second = critique_fn(out.artifact)
                out.critiques += 1
                if second.severity > result.severity:
                    result = second
        except Exception as exc:  # noqa: BLE001 - abort with the last good artifact
            out.exit_reason, out.error = "error", f"critique failed: {exc}"
            return out
        out.final_severity = result.severity
        out.transcript.append({"iteration": i, **result.to_dict()})
        if result.severity <= cfg.exit_severity:
            out.exit_reason = "accepted"
            return out
        if cfg.convergence_detection and previous == result.issues:
            out.exit_reason = "converged"
            return out
        previous = result.issues
        if i == cfg.max_iterations:
            break
        if result.severity >= Severity.MAJOR:
            try:
                out.artifact = revise_fn(out.artifact, result)
            except Exception as exc:  # noqa: BLE001
                out.exit_reason, out.error = "error", f"revision failed: {exc}"
                return out
            out.revisions += 1
    out.exit_reason = "exhausted"
    return out


class Scope(str, Enum):
    PHASE = "PHASE"
    PLAN = "PLAN"
    GIVE_UP = "GIVE_UP"


@dataclass(frozen=True)
class BacktrackDecision:
    scope: Scope
    evidence: tuple[FailureRecord, ...]

    def to_dict(self) -> dict:
        return {"scope": self.scope.value, "evidence": [e.to_dict() for e in self.evidence]}


def decide_scope(evidence, phase_fail_count: int, plan_revisions: int = 0,
                 per_phase_cap: int = 2, plan_revision_cap: int = 2) -> BacktrackDecision:
    """Route a failure to phase- or plan-level recovery.

    ``phase_fail_count`` counts failures of the phase including this one;
    ``plan_revisions`` counts plan-level backtracks already taken.
    """
    evidence = tuple(evidence)
    if not evidence:
        raise ValueError("a backtrack decision needs failure evidence")
    if phase_fail_count < per_phase_cap:
        return BacktrackDecision(Scope.PHASE, evidence)
    if plan_revisions < plan_revision_cap:
        return BacktrackDecision(Scope.PLAN, evidence)
    return BacktrackDecision(Scope.GIVE_UP, evidence)


def phase_checkpoint_id(phase_id: str) -> str:
    return f"phase:{phase_id}"


def predecessor_checkpoint(plan: Plan, phase_id: str) -> str:
    i = plan.phase_index(phase_id)
    return DATA_UNDERSTANDING if i == 0 else phase_checkpoint_id(plan.phases[i - 1].id)


def _evidence_hints(evidence) -> list[str]:
    hints = []
    for e in evidence:
        where = f"substep {e.substep_id}" if e.substep_id else f"phase {e.phase_id}"
        hints.append(f"Earlier failure in {where} ({e.category}): {e.message}")
    return hints


def backtrack_phase(state: PipelineState, case: CaseFolder, phase_id: str,
                    evidence=()) -> PipelineState:
    """Revert to the checkpoint before ``phase_id`` and mark it for re-expansion.

    Outputs and checkpoints of this phase and every later phase are discarded.
    Raises MissingCheckpointError when the predecessor checkpoint is gone; the
    caller escalates to plan level.
    """
    if state.plan is None:
        raise ValueError("no active plan")
    plan = state.plan.snapshot()
    cp_id = predecessor_checkpoint(plan, phase_id)
    if cp_id not in state.checkpoints:
        raise MissingCheckpointError(f"no checkpoint {cp_id!r} before phase {phase_id!r}")
    tables, _ = case.restore_checkpoint(cp_id)
    idx = plan.phase_index(phase_id)
    dropped_phases = plan.phases[idx:]
    dropped_substeps = {s.id for p in dropped_phases for s in p.substeps}
    checkpoints = dict(state.checkpoints)
    for p in dropped_phases:
        pid = phase_checkpoint_id(p.id)
        if pid in checkpoints:
            case.discard_checkpoint(pid)
            del checkpoints[pid]
    phase = plan.phases[idx]
    phase.hints = list(dict.fromkeys(phase.hints + _evidence_hints(evidence) + [REEXPAND_DIRECTIVE]))
    phase.substeps = []
    for later in plan.phases[idx + 1:]:
        later.substeps = []
    return replace(state, plan=plan, checkpoints=checkpoints, active=dict(tables),
                   completed=[s for s in state.completed if s not in dropped_substeps],
                   failure_log=list(state.failure_log))


def backtrack_plan(state: PipelineState, case: CaseFolder) -> PipelineState:
    """Reset to the data-understanding checkpoint, keeping the failure log."""
    if DATA_UNDERSTANDING not in state.checkpoints:
        raise MissingCheckpointError("no data-understanding checkpoint")
    tables, _ = case.restore_checkpoint(DATA_UNDERSTANDING)
    checkpoints = {DATA_UNDERSTANDING: state.checkpoints[DATA_UNDERSTANDING]}
    for cp_id in state.checkpoints:
        if cp_id != DATA_UNDERSTANDING:
            case.discard_checkpoint(cp_id)
    return replace(state, plan=None, checkpoints=checkpoints, active=dict(tables), completed=[],
                   failure_log=copy.copy(state.failure_log), phase_failures={},
                   plan_backtracks=state.plan_backtracks + 1)
