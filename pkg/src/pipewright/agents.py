"""The pipeline driver: understand, plan, critique, expand, execute, finalize.

The orchestrator owns one :class:`PipelineState` and moves it through the six
stages, routing failures through phase- and plan-level backtracking. Planning
and expansion calls see profiles, schemas and contracts only; table values
reach generated code, never the planning prompts.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import pandas as pd

from . import monitor, prompts
from .case import (CaseFolder, MissingCheckpointError, assemble_pipeline, checkpoint,
                   write_table)
from .config import RunConfig, StrategyKind
from .contracts import has_critical, render_violations, validate_output
from .gateway import Gateway, GatewayError, PromptBlock, cap_traceback, project_columns
from .model import (DATA_UNDERSTANDING, Actor, DataProfile, FailureRecord, Phase, PipelineState,
                    Plan, Stage, Substep, TaskSpec)
from .packs import Registry, detect_domains, select_guidance
from .profiling import ProfilingError, load_inputs, profile_inputs
from .recovery import (CritiqueResult, Issue, Scope, Severity, backtrack_phase, backtrack_plan,
                       critique_loop, decide_scope, phase_checkpoint_id)
from .sampling import (Attempt, LevelResult, SamplingLevel, draw_sample, fingerprint,
                       run_validation)
from .sandbox import ExecutionLimits, execute_stage


class PlanningError(Exception):
    pass


class ExpansionFailed(Exception):
    pass


class DispatchError(Exception):
    pass


@dataclass
class FinalResult:
    success: bool
    case_path: Path
    status: str = "success"  # "success", "failed" or "paused"
    answer: pd.DataFrame | None = None
    answer_text: str | None = None
    totals: dict = field(default_factory=dict)
    reason: str | None = None


# data flow --------------------------------------------------------------------------

def resolve_inputs(plan: Plan, substep: Substep, input_names: Sequence[str]) -> list[str]:
    """Table references a substep reads, in argument order.

    Explicit ``inputs`` win; otherwise the outputs of ``depends_on``; otherwise
    the last substep of the previous phase, or every input table in phase one.
    """
    if substep.inputs:
        return list(substep.inputs)
    if substep.depends_on:
        return list(substep.depends_on)
    idx = plan.phase_index(plan.phase_of(substep.id).id)
    if idx > 0 and plan.phases[idx - 1].substeps:
        return [plan.phases[idx - 1].substeps[-1].id]
    return list(input_names)


def substep_dependencies(plan: Plan, substep: Substep, input_names: Sequence[str]) -> set[str]:
    ids = {s.id for s in plan.substeps()}
    refs = set(resolve_inputs(plan, substep, input_names)) | set(substep.depends_on)
    return {r for r in refs if r in ids}


def _depth_batches(substeps: list[Substep], deps: dict[str, set[str]]) -> list[list[str]]:
    pending = {s.id for s in substeps}
    depth: dict[str, int] = {}
    visiting: set[str] = set()

    def visit(sid: str) -> int:
        if sid in depth:
            return depth[sid]
        if sid in visiting:
            raise DispatchError(f"dependency cycle through {sid!r}")
        visiting.add(sid)
        inner = [d for d in deps[sid] if d in pending]
        depth[sid] = 1 + max((visit(d) for d in inner), default=-1)
        visiting.discard(sid)
        return depth[sid]

    for s in substeps:
        visit(s.id)
    batches: dict[int, list[str]] = {}
    for s in substeps:
        batches.setdefault(depth[s.id], []).append(s.id)
    return [batches[k] for k in sorted(batches)]


def dispatch(plan: Plan, strategy: StrategyKind, input_names: Sequence[str] = (),
             completed: Sequence[str] = ()) -> list[list[str]]:
    """Execution schedule for the expanded, not yet completed substeps."""
    done = set(completed)
    ids = {s.id for s in plan.substeps()}
    deps = {}
    for s in plan.substeps():
        unknown = set(s.depends_on) - ids
        if unknown:
            raise DispatchError(f"{s.id} depends on unknown substeps {sorted(unknown)}")
        deps[s.id] = substep_dependencies(plan, s, input_names) - done
    if strategy is StrategyKind.CENTRALIZED:
        order = [s for s in plan.substeps() if s.id not in done]
        _depth_batches(order, deps)  # cycle check only
        return [[s.id] for s in _topological(order, deps)]
    if strategy is StrategyKind.AUTONOMOUS:
        return _depth_batches([s for s in plan.substeps() if s.id not in done], deps)
    batches = []
    for phase in plan.phases:
        members = [s for s in phase.substeps if s.id not in done]
        local = {s.id: deps[s.id] & {m.id for m in members} for s in members}
        batches += _depth_batches(members, local)
    return batches


def _topological(order: list[Substep], deps: dict[str, set[str]]) -> list[Substep]:
    placed: list[Substep] = []
    names: set[str] = set()
    remaining = list(order)
    pending = {s.id for s in order}
    while remaining:
        for s in remaining:
            if not (deps[s.id] & pending) - names:
                placed.append(s)
                names.add(s.id)
                remaining.remove(s)
                break
        else:
            raise DispatchError("dependency cycle among substeps")
    return placed


# the driver -------------------------------------------------------------------------

@dataclass
class _SubstepRun:
    substep: Substep
    success: bool
    output: pd.DataFrame | None = None
    code: str | None = None
    record: FailureRecord | None = None
    halt: str | None = None


def _answer_text(df: pd.DataFrame) -> str | None:
    if df.shape == (1, 1):
        return str(df.iat[0, 0])
    return None


class Pipeline:
    def __init__(self, task: TaskSpec, config: RunConfig, backend, case_dir: Path | str,
                 registry: Registry | None = None, clock=None):
        self.task = task
        self.config = config
        self.case = CaseFolder(case_dir, clock)
        self.gateway = Gateway(backend, config.models, config.prices, on_event=self._gateway_event)
        self.registry = registry or Registry.load(*([Path(__file__).parent / "packs" / "data"]
                                                    + [Path(d) for d in config.pack_dirs]))
        self.state = PipelineState()
        self.packs = []
        self.prior_warnings: list[str] = []
        self.accepted_code: dict[str, str] = {}
        self.limits = ExecutionLimits(config.wall_clock_s,
                                      config.memory_mb * 2**20 if config.memory_mb else None)
        self._lock = threading.Lock()
        self.critique_calls = 0

    # events ------------------------------------------------------------------------
    def emit(self, actor: Actor, kind: str, payload: dict | None = None) -> None:
        self.case.emit(actor, kind, payload or {})

    def _gateway_event(self, kind: str, payload: dict) -> None:
        call_kind = payload.get("call_kind", "")
        if call_kind.startswith("codegen"):
            actor = Actor.GROUND_AGENT
        elif kind == "prompt_budget" or call_kind == "semantic_validate":
            actor = Actor.ORCHESTRATOR
        else:
            actor = Actor.ARCHITECT
        self.emit(actor, kind, payload)

    def _stage(self, stage: Stage) -> None:
        self.state.current_stage = stage
        self.emit(Actor.ORCHESTRATOR, "stage", {"stage": stage.value})

    # model calls -------------------------------------------------------------------
    def _ask(self, role: str, blocks: list[PromptBlock], call_kind: str, parse):
        try:
            text = self.gateway.complete(role, blocks, call_kind).text
            try:
                return parse(text)
            except prompts.ParseError as exc:
                self.emit(Actor.ORCHESTRATOR, "format_retry", {"call_kind": call_kind,
                                                               "error": str(exc)})
            reminder = PromptBlock("format_reminder", 0, prompts.FORMAT_REMINDER)
            text = self.gateway.complete(role, blocks + [reminder], call_kind).text
        except GatewayError as exc:
            raise PlanningError(f"{call_kind}: {exc}") from exc
        try:
            return parse(text)
        except prompts.ParseError as exc:
            raise PlanningError(f"{call_kind}: unparseable response after retry: {exc}") from exc

    def _critique(self, blocks, call_kind) -> CritiqueResult:
        self.critique_calls += 1
        return self._ask("planning", blocks, call_kind, prompts.parse_critique)

    # stage 1 -----------------------------------------------------------------------
    def understand(self) -> DataProfile:
        self._stage(Stage.DATA_UNDERSTANDING)
        profile = profile_inputs(self.task)
        tables = load_inputs(profile)
        self.state = replace(self.state, profile=profile, active=dict(tables))
        self.state = checkpoint(self.state, self.case, DATA_UNDERSTANDING, tables, None)
        self.emit(Actor.ORCHESTRATOR, "profile", profile.to_dict())
        columns = [c for f in profile.files for c in f.column_names]
        self.packs = detect_domains(self.task.goal, columns, self.registry)
        self.emit(Actor.ORCHESTRATOR, "domains", {"packs": [p.name for p in self.packs]})
        notes: list[str] = []
        mined = monitor.mine_patterns([Path(p) for p in self.config.prior_cases],
                                      self.config.pattern_k, notes)
        self.prior_warnings = [w.text for w in mined]
        if mined or notes:
            self.emit(Actor.MONITOR, "prior_patterns",
                      {"warnings": self.prior_warnings, "notes": notes})
        return profile

    @property
    def input_names(self) -> list[str]:
        return [f.name for f in self.state.profile.files]

    # stages 2-3 --------------------------------------------------------------------
    def plan(self) -> Plan:
        self._stage(Stage.PLANNING)
        goal, revision = self.task.goal, self.state.plan_backtracks
        guidance = [g for p in self.packs for g in p.planning_guidance]
        blocks = prompts.planning_blocks(goal, self.state.profile, guidance,
                                         self.state.failure_log, self.prior_warnings)
        plan = self._ask("planning", blocks, "plan", lambda t: prompts.parse_plan(t, revision))
        self.emit(Actor.ARCHITECT, "plan_proposed", plan.to_dict())
        if self.config.critique.plan:
            plan = self.refine_plan(plan)
        self.emit(Actor.ARCHITECT, "plan_accepted", plan.to_dict())
        return plan

    def refine_plan(self, plan: Plan) -> Plan:
        self._stage(Stage.CRITIQUE)
        goal, revision = self.task.goal, plan.revision
        outcome = critique_loop(
            plan,
            lambda p: self._critique(prompts.plan_critique_blocks(goal, p), "plan_critique"),
            lambda p, c: self._ask("planning", prompts.plan_revise_blocks(goal, p, c), "plan_revise",
                                   lambda t: prompts.parse_plan(t, revision)),
            self.config.critique.loop_config())
        self.emit(Actor.ARCHITECT, "plan_critique", {
            "transcript": outcome.transcript, "critiques": outcome.critiques,
            "revisions": outcome.revisions, "exit": outcome.exit_reason, "error": outcome.error})
        if outcome.exit_reason in ("exhausted", "converged") and outcome.final_severity >= Severity.MAJOR:
            self.emit(Actor.ORCHESTRATOR, "warning", {
                "message": f"plan accepted with unresolved {outcome.final_severity.name} critique "
                           f"after {outcome.critiques} critiques"})
        return outcome.artifact

    # stage 4 -----------------------------------------------------------------------
    def _known_columns(self, plan: Plan) -> dict[str, list[str]]:
        """Column names per table reference: actual where the table exists,
        otherwise predicted from the producing substep's contract."""
        known: dict[str, list[str]] = {f.name: f.column_names for f in self.state.profile.files}
        for ref, df in self.state.active.items():
            known[ref] = [str(c) for c in df.columns]
        for s in plan.substeps():
            if s.id not in known:
                base: list[str] = []
                for ref in resolve_inputs(plan, s, self.input_names):
                    base += [c for c in known.get(ref, []) if c not in base]
                known[s.id] = s.contract.output_columns(base)
        return known

    def structural_issues(self, plan: Plan, phase: Phase, substeps: Sequence[Substep]) -> list[Issue]:
        issues = []
        if not 1 <= len(substeps) <= 3:
            issues.append(Issue(f"substep count {len(substeps)} is outside 1 to 3", phase.id))
        ids = [s.id for s in substeps]
        earlier = [s.id for p in plan.phases[:plan.phase_index(phase.id)] for s in p.substeps]
        later = [s.id for p in plan.phases[plan.phase_index(phase.id) + 1:] for s in p.substeps]
        for sid in ids:
            if ids.count(sid) > 1 or sid in earlier or sid in later or sid in self.input_names:
                issues.append(Issue(f"substep id {sid!r} is not unique", sid))
        # Column availability, predicted through the contracts of earlier substeps.
        trial = plan.snapshot()
        trial.phases[plan.phase_index(phase.id)].substeps = list(substeps)
        valid_refs = set(self.input_names) | set(earlier)
        known = self._known_columns(trial)
        seen: set[str] = set()
        for s in substeps:
            refs = resolve_inputs(trial, s, self.input_names)
            for ref in refs + list(s.depends_on):
                if ref not in valid_refs and ref not in ids:
                    issues.append(Issue(f"substep {s.id} reads unknown table {ref!r}", s.id))
            for dep in s.depends_on:
                if dep in ids and dep not in seen:
                    issues.append(Issue(f"substep {s.id} depends on {dep!r}, which comes later", s.id))
            available = {c for ref in refs for c in known.get(ref, [])}
            for col in s.contract.required_inputs:
                if col not in available:
                    issues.append(Issue(f"substep {s.id} requires column {col!r}, which no "
                                        "predecessor or input provides", s.id))
            seen.add(s.id)
        return issues

    def tables_view(self, plan: Plan, phase: Phase) -> str:
        """What the expansion prompt may see: schemas, or contracts in autonomous mode."""
        goal = self.task.goal
        lines = [prompts.schema_block(self.state.profile, goal)]
        autonomous = self.config.strategy is StrategyKind.AUTONOMOUS
        known = self._known_columns(plan)
        for p in plan.phases[:plan.phase_index(phase.id)]:
            for s in p.substeps:
                if s.id in self.state.active and not autonomous:
                    df = self.state.active[s.id]
                    cols = project_columns([str(c) for c in df.columns], goal)
                    lines.append(f"Table `{s.id}` (output of {s.id}): "
                                 + ", ".join(f"{c} {df[c].dtype}" for c in cols))
                else:
                    base = [c for ref in resolve_inputs(plan, s, self.input_names)
                            for c in known.get(ref, [])]
                    lines.append(prompts.contract_only_view(s.id, s, list(dict.fromkeys(base))))
        return "\n".join(lines)

    def expand(self, plan: Plan, phase: Phase) -> list[Substep]:
        self._stage(Stage.EXPANSION)
        pid = phase.id
        view = self.tables_view(plan, phase)
        guidance = select_guidance(self.packs, phase.objective).render()
        try:
            substeps = self._ask("planning", prompts.expansion_blocks(
                self.task.goal, plan, phase, view, guidance, self.prior_warnings),
                f"expand/{pid}", prompts.parse_substeps)
        except PlanningError as exc:
            raise ExpansionFailed(str(exc)) from exc

        def critique(subs):
            issues = self.structural_issues(plan, phase, subs)
            severity = Severity.MAJOR if issues else Severity.NONE
            if self.config.critique.expansion:
                judged = self._critique(prompts.expansion_critique_blocks(phase, subs, view, issues),
                                        f"expand_critique/{pid}")
                severity = max(severity, judged.severity)
                issues = issues + list(judged.issues)
            return CritiqueResult(severity, tuple(issues) if severity is not Severity.NONE else ())

        def revise(subs, result):
            return self._ask("planning", prompts.expansion_revise_blocks(phase, subs, result, view),
                             f"expand_revise/{pid}", prompts.parse_substeps)

        outcome = critique_loop(substeps, critique, revise, self.config.critique.loop_config())
        self.emit(Actor.ARCHITECT, "expansion", {
            "phase": pid, "substeps": [s.to_dict() for s in outcome.artifact],
            "transcript": outcome.transcript, "exit": outcome.exit_reason, "error": outcome.error})
        if outcome.exit_reason == "error":
            raise ExpansionFailed(outcome.error)
        if outcome.final_severity is not None and outcome.final_severity >= Severity.MAJOR:
            raise ExpansionFailed(f"expansion critique still {outcome.final_severity.name} after "
                                  f"{outcome.critiques} critiques: "
                                  + "; ".join(i["description"] for i in outcome.transcript[-1]["issues"]))
        return list(outcome.artifact)

    # stage 5 -----------------------------------------------------------------------
    def _inputs_view(self, plan: Plan, substep: Substep, refs: Sequence[str]) -> str:
        autonomous = self.config.strategy is StrategyKind.AUTONOMOUS
        lines = []
        for i, ref in enumerate(refs):
            arg = prompts.arg_name(ref)
            if ref in self.input_names:
                df = self.state.active[ref]
                fp = self.state.profile.file(ref)
                cols = project_columns([str(c) for c in df.columns], substep.objective + " "
                                       + self.task.goal)
                by_name = {c.name: c for c in fp.columns}
                lines.append(f"Argument {i + 1} `{arg}` = input table `{ref}` "
                             f"({'headerless, columns named by position' if not fp.has_header else 'with header'}):")
                for c in cols:
                    prof = by_name.get(c)
                    extra = f", {prof.null_rate:.0%} null" if prof else ""
                    if prof and prof.min is not None:
                        extra += f", range {prof.min} to {prof.max}"
                    lines.append(f"  - {c}: {df[c].dtype}{extra}")
            elif autonomous or ref not in self.state.active:
                producer = next(s for s in plan.substeps() if s.id == ref)
                known = self._known_columns(plan)
                base = [c for r in resolve_inputs(plan, producer, self.input_names)
                        for c in known.get(r, [])]
                lines.append(f"Argument {i + 1} `{arg}`: "
                             + prompts.contract_only_view(ref, producer, list(dict.fromkeys(base))))
            else:
                df = self.state.active[ref]
                cols = project_columns([str(c) for c in df.columns], substep.objective)
                lines.append(f"Argument {i + 1} `{arg}` = output of `{ref}`: "
                             + ", ".join(f"{c} {df[c].dtype}" for c in cols))
        return "\n".join(lines)

    def _attempt(self, substep: Substep, code: str, level: SamplingLevel,
                 tables: dict[str, pd.DataFrame], revisions: int) -> Attempt:
        samples = {ref: draw_sample(df, level, self.config.seed) for ref, df in tables.items()}
        primary = next(iter(samples.values()))
        result = execute_stage(code, samples, self.limits)
        out = result.output if result.success else None
        violations = validate_output(substep.contract, len(primary), out, primary) if out is not None else []
        cost = self.gateway.snapshot().cost
        verdict = monitor.evaluate(
            result, rows_in=len(primary), rows_out=len(out) if out is not None else 0,
            null_before=monitor.null_rates(primary),
            null_after=monitor.null_rates(out) if out is not None else None,
            revisions=revisions, cost_spent=cost, cost_budget=self.config.cost_budget,
            thresholds=self.config.thresholds, row_relation=substep.contract.row_relation)
        self.emit(Actor.GROUND_AGENT, "execution", {
            "substep": substep.id, "level": level.name, "success": result.success,
            "error_kind": result.error.kind.value if result.error else None,
            "rows_in": len(primary), "rows_out": len(out) if out is not None else None,
            "violations": [v.to_dict() for v in violations], "stage_warnings": result.warnings,
            "timing": {"elapsed_s": result.elapsed_s, "peak_memory_bytes": result.peak_memory_bytes}})
        self.emit(Actor.MONITOR, "verdict", {"substep": substep.id, "level": level.name,
                                             **verdict.to_dict()})
        ok = result.success and not has_critical(violations)
        parts = []
        if not result.success:
            parts.append(cap_traceback(result.error_text, self.config.traceback_tokens))
        if violations:
            parts.append(render_violations(violations))
        if verdict.alerts:
            parts.append("Monitor verdict " + verdict.describe())
        feedback = "\n".join(parts)
        halt = {monitor.Decision.RETRY: "retry", monitor.Decision.ABORT: "abort",
                monitor.Decision.PAUSE: "pause"}.get(verdict.decision)
        if not ok or halt:
            cat = monitor.categorize_failure(feedback, self.packs)
            self.emit(Actor.MONITOR, monitor.FAILURE_EVENT, {
                "substep": substep.id, "level": level.name, "category": cat.name,
                "hint": cat.hint, "domain_hints": list(cat.domain_hints)})
            hints = [cat.hint] + list(cat.domain_hints)
            feedback += f"\nFailure category {cat.name}. " + " ".join(hints)
        level_result = LevelResult(level, ok, fingerprint(out) if out is not None else (),
                                   len(primary), len(out) if out is not None else 0,
                                   result.elapsed_s, violations)
        return Attempt(level_result, ok, feedback, halt, result, out)

    def execute_substep(self, plan: Plan, substep: Substep) -> _SubstepRun:
        phase = plan.phase_of(substep.id)
        refs = resolve_inputs(plan, substep, self.input_names)
        missing = [r for r in refs if r not in self.state.active]
        if missing:
            return self._failed(phase, substep, "missing-input", "FILE_FORMAT",
                                f"input tables {missing} are not available", None, 0)
        tables = {r: self.state.active[r] for r in refs}
        view = self._inputs_view(plan, substep, refs)
        hints = list(dict.fromkeys(substep.hints + phase.hints))
        guidance = select_guidance(self.packs, substep.objective).render()
        counter = {"calls": 0}

        def codegen(request):
            counter["calls"] += 1
            blocks = prompts.codegen_blocks(substep, refs, view, hints, guidance,
                                            request.feedback, self.prior_warnings)
            text = self.gateway.complete("coding", blocks, f"codegen/{substep.id}").text
            code = prompts.extract_code(text)
            rev = self.case.write_code(substep.id, code)
            self.emit(Actor.GROUND_AGENT, "code", {"substep": substep.id, "revision": rev,
                                                   "request": request.kind})
            return code

        def runner(code, level):
            return self._attempt(substep, code, level, tables, counter["calls"] - 1)

        def on_event(kind, payload):
            self.emit(Actor.GROUND_AGENT, f"validation_{kind}", payload)

        try:
            outcome = run_validation(substep, codegen, runner, self.config.sampling,
                                     self.config.refinement_budget, self.config.uct_c,
                                     self.config.tau, self.config.early_stop, on_event)
        except GatewayError as exc:
            return self._failed(phase, substep, "model-error", "OTHER", str(exc), None,
                                max(counter["calls"] - 1, 0))
        last = outcome.last
        if outcome.success:
            final = last
            if final.level_result.level is not SamplingLevel.FULL or not final.ok:
                final = runner(outcome.accepted_code, SamplingLevel.FULL)
                self.emit(Actor.GROUND_AGENT, "production_run", {"substep": substep.id,
                                                                  "success": final.ok})
            if final.ok and not final.halt:
                return _SubstepRun(substep, True, final.output, outcome.accepted_code)
            last, reason = final, final.halt or "production run failed"
        else:
            reason = outcome.failure_reason or "validation failed"
        cat = monitor.categorize_failure(last.feedback if last else "", self.packs)
        message = self._summary(last.feedback if last else reason)
        hint = " ".join([cat.hint] + list(cat.domain_hints))
        return self._failed(phase, substep, reason, cat.name, f"{reason}: {message} Hint: {hint}",
                            last.level_result.level.name if last else None,
                            outcome.revisions_used, halt=last.halt if last else None)

    @staticmethod
    def _summary(feedback: str) -> str:
        lines = [ln.strip() for ln in feedback.splitlines() if ln.strip()]
        flagged = [ln for ln in lines if ln.startswith(("Monitor verdict", "- ["))]
        # the exception line closes the traceback, before any violation list
        body = [ln for ln in lines if ln not in flagged and not ln.startswith(
            ("File ", "Traceback", "...", "^", "Failure category", "Contract violations"))]
        cut = lines.index(flagged[0]) if flagged else len(lines)
        error = [ln for ln in body if lines.index(ln) < cut][-1:]
        return " ".join(error + flagged)[:400]

    def _failed(self, phase, substep, kind, category, message, level, revisions, halt=None):
        record = FailureRecord(phase.id, substep.id, kind, category, message, level, revisions)
        return _SubstepRun(substep, False, record=record, halt=halt)

    # recovery ----------------------------------------------------------------------
    def _phase_failed(self, phase_id: str, record: FailureRecord):
        """Log a failure and backtrack. Returns None to keep executing, or a terminal status."""
        self.state.log_failure(record)
        self.emit(Actor.ORCHESTRATOR, "failure_logged", record.to_dict())
        count = self.state.phase_failures.get(phase_id, 0) + 1
        self.state.phase_failures[phase_id] = count
        evidence = [r for r in self.state.failure_log if r.phase_id == phase_id]
        decision = decide_scope(evidence, count, self.state.plan_backtracks,
                                self.config.per_phase_cap, self.config.plan_revision_cap)
        if decision.scope is Scope.PHASE:
            try:
                self.state = backtrack_phase(self.state, self.case, phase_id, evidence)
            except MissingCheckpointError as exc:
                scope = (Scope.PLAN if self.state.plan_backtracks < self.config.plan_revision_cap
                         else Scope.GIVE_UP)
                decision = replace(decision, scope=scope)
                self.emit(Actor.ORCHESTRATOR, "escalation", {"reason": str(exc)})
            else:
                self.accepted_code = {k: v for k, v in self.accepted_code.items()
                                      if k in self.state.completed}
                self.emit(Actor.ORCHESTRATOR, "backtrack", {"phase": phase_id, **decision.to_dict()})
                return None
        self.emit(Actor.ORCHESTRATOR, "backtrack", {"phase": phase_id, **decision.to_dict()})
        return decision.scope

    def _checkpoint_phases(self) -> None:
        plan = self.state.plan
        for p in plan.phases:
            cp_id = phase_checkpoint_id(p.id)
            if cp_id in self.state.checkpoints:
                continue
            if not p.substeps or any(s.id not in self.state.completed for s in p.substeps):
                return
            self.state = checkpoint(self.state, self.case, cp_id, dict(self.state.active), plan)
            self.emit(Actor.ORCHESTRATOR, "checkpoint", {"id": cp_id})

    def execute(self):
        """Run the accepted plan. Returns "done", or a Scope / "pause" on failure."""
        self._stage(Stage.EXECUTION)
        lazy = self.config.strategy is StrategyKind.CENTRALIZED
        while True:
            plan = self.state.plan
            pending = [p for p in plan.phases if phase_checkpoint_id(p.id) not in self.state.checkpoints]
            if not pending:
                return "done"
            to_expand = [p for p in (pending[:1] if lazy else pending) if not p.expanded]
            failed = None
            for phase in to_expand:
                try:
                    phase.substeps = self.expand(plan, phase)
                    self.emit(Actor.ORCHESTRATOR, "schedule",
                              {"batches": dispatch(plan, self.config.strategy, self.input_names,
                                                   self.state.completed)})
                except (ExpansionFailed, DispatchError) as exc:
                    failed = FailureRecord(phase.id, None, "expansion", "OTHER", str(exc))
                    break
            if failed:
                status = self._phase_failed(failed.phase_id, failed)
                if status is not None:
                    return status
                continue
            if self.state.current_stage is not Stage.EXECUTION:
                self._stage(Stage.EXECUTION)
            batches = dispatch(plan, self.config.strategy, self.input_names, self.state.completed)
            batch = [next(s for s in plan.substeps() if s.id == sid) for sid in batches[0]]
            if len(batch) > 1:
                with ThreadPoolExecutor(min(len(batch), self.config.max_workers)) as pool:
                    runs = list(pool.map(lambda s: self.execute_substep(plan, s), batch))
            else:
                runs = [self.execute_substep(plan, batch[0])]
            for run in runs:
                if run.success:
                    with self._lock:
                        self.state.active[run.substep.id] = run.output
                        self.state.completed.append(run.substep.id)
                        self.accepted_code[run.substep.id] = run.code
                    self.emit(Actor.ORCHESTRATOR, "substep_done", {"substep": run.substep.id})
            failures = [r for r in runs if not r.success]
            if failures:
                first = failures[0]
                if first.halt == "pause":
                    self.state.log_failure(first.record)
                    return "pause"
                status = self._phase_failed(first.record.phase_id, first.record)
                if status is not None:
                    return status
                continue
            self._checkpoint_phases()

    # semantic check and stage 6 ----------------------------------------------------
    def semantic_validate(self, answer: pd.DataFrame) -> str:
        text = answer.head(20).to_string(index=False)
        try:
            verdict, reason = self._ask("planning", prompts.semantic_blocks(
                self.task.goal, self.state.profile, text), "semantic_validate", prompts.parse_semantic)
        except (PlanningError, GatewayError) as exc:
            self.emit(Actor.ORCHESTRATOR, "semantic_check", {"verdict": "plausible", "fail_open": True,
                                                             "error": str(exc)})
            return "plausible"
        self.emit(Actor.ORCHESTRATOR, "semantic_check", {"verdict": verdict, "reason": reason})
        return verdict

    def final_ref(self) -> str:
        return self.state.plan.phases[-1].substeps[-1].id

    def finalize(self, started: float) -> FinalResult:
        self._stage(Stage.FINALIZATION)
        plan = self.state.plan
        ref = self.final_ref()
        answer = self.state.active[ref]
        write_table(answer, self.case.root / "final" / "output.csv")
        stages = []
        for sid in self.state.completed:
            s = next(x for x in plan.substeps() if x.id == sid)
            stages.append({"substep_id": sid, "agent_type": s.agent_type, "objective": s.objective,
                           "code": self.accepted_code[sid],
                           "inputs": resolve_inputs(plan, s, self.input_names), "output": sid})
        self.case.write_json("pipeline.json", {"profile": self.state.profile.to_dict(),
                                               "plan": plan.to_dict(), "stages": stages, "final": ref})
        text = _answer_text(answer)
        totals = self._totals(started)
        self.case.write_json("summary.json", {"success": True, "status": "success", "answer": text,
                                              "final_rows": len(answer), **totals})
        assemble_pipeline(self.case)
        self.emit(Actor.ORCHESTRATOR, "finalized", {"final": ref, "rows": len(answer),
                                                    "answer": text, "stages": len(stages)})
        return FinalResult(True, self.case.root, "success", answer, text, totals)

    def _totals(self, started: float) -> dict:
        ledger = self.gateway.snapshot()
        self.state.cost_ledger = ledger
        return {"model_calls": ledger.calls, "critique_calls": self.critique_calls,
                "prompt_tokens": ledger.prompt_tokens, "completion_tokens": ledger.completion_tokens,
                "cost": ledger.cost, "duration_s": round(time.perf_counter() - started, 3),
                "plan_backtracks": self.state.plan_backtracks,
                "failures": len(self.state.failure_log),
                "failure_categories": [r.category for r in self.state.failure_log]}

    def _stop(self, started: float, status: str, reason: str) -> FinalResult:
        totals = self._totals(started)
        if status == "paused":
            n = sum(1 for c in self.state.checkpoints if c.startswith("pause:"))
            cp_id = f"pause:{n}"
            self.state = checkpoint(self.state, self.case, cp_id, dict(self.state.active),
                                    self.state.plan)
            self.case.write_json("paused.json", {
                "checkpoint": cp_id, "completed": self.state.completed,
                "accepted_code": self.accepted_code, "phase_failures": self.state.phase_failures,
                "plan_backtracks": self.state.plan_backtracks,
                "checkpoints": sorted(self.state.checkpoints),
                "failure_log": [r.to_dict() for r in self.state.failure_log]})
        self.case.write_json("summary.json", {"success": False, "status": status, "reason": reason,
                                              **totals})
        self.emit(Actor.ORCHESTRATOR, "stopped", {"status": status, "reason": reason})
        return FinalResult(False, self.case.root, status, totals=totals, reason=reason)

    def _write_config(self) -> None:
        self.case.write_json("config.json", {
            "task": {"goal": self.task.goal, "inputs": [str(p) for p in self.task.inputs]},
            "config": self.config.to_dict()})

    def run(self) -> FinalResult:
        started = time.perf_counter()
        try:
            self.task.validate()
            self._write_config()
            self.emit(Actor.ORCHESTRATOR, "run_started", {"goal": self.task.goal,
                                                          "strategy": self.config.strategy.value})
            try:
                self.understand()
            except ProfilingError as exc:
                return self._stop(started, "failed", str(exc))
            return self._loop(started)
        finally:
            self.case.close()

    def _loop(self, started: float) -> FinalResult:
        while True:
            if self.state.plan is None:
                try:
                    self.state.plan = self.plan()
                except PlanningError as exc:
                    return self._stop(started, "failed", f"planning failed: {exc}")
            status = self.execute()
            if status == "done":
                if self.config.semantic_validation:
                    verdict = self.semantic_validate(self.state.active[self.final_ref()])
                    if verdict == "replan":
                        if self.state.plan_backtracks < self.config.plan_revision_cap:
                            record = FailureRecord(self.state.plan.phases[-1].id, None, "semantic",
                                                   "OTHER", "semantic check judged the answer "
                                                            "implausible")
                            self.state.log_failure(record)
                            self.state = backtrack_plan(self.state, self.case)
                            self.emit(Actor.ORCHESTRATOR, "plan_backtrack",
                                      {"revision": self.state.plan_backtracks, "cause": "semantic"})
                            continue
                        self.emit(Actor.ORCHESTRATOR, "warning", {
                            "message": "semantic check asked to replan but the plan cap is reached"})
                return self.finalize(started)
            if status == "pause":
                return self._stop(started, "paused", "monitor paused the run (cost budget reached)")
            if status is Scope.PLAN:
                self.state = backtrack_plan(self.state, self.case)
                self.accepted_code = {}
                self.emit(Actor.ORCHESTRATOR, "plan_backtrack",
                          {"revision": self.state.plan_backtracks,
                           "failures": len(self.state.failure_log)})
                continue
            return self._stop(started, "failed", "recovery caps exhausted")

    # resumption ------------------------------------------------------------------
    def resume(self) -> FinalResult:
        """Continue a paused run from its last pause checkpoint."""
        started = time.perf_counter()
        try:
            info = self.case.read_json("paused.json")
            tables, plan = self.case.restore_checkpoint(info["checkpoint"])
            profile = profile_inputs(self.task)
            columns = [c for f in profile.files for c in f.column_names]
            self.packs = detect_domains(self.task.goal, columns, self.registry)
            self.state = PipelineState(
                current_stage=Stage.EXECUTION, profile=profile, plan=plan, active=tables,
                completed=list(info["completed"]),
                checkpoints={c: True for c in info["checkpoints"]},
                failure_log=[FailureRecord.from_dict(r) for r in info["failure_log"]],
                phase_failures=dict(info["phase_failures"]),
                plan_backtracks=info["plan_backtracks"])
            self.accepted_code = dict(info["accepted_code"])
            (self.case.root / "paused.json").rename(self.case.root / f"resumed-{info['checkpoint'].replace(':', '_')}.json")
            self.emit(Actor.CLI, "resumed", {"checkpoint": info["checkpoint"]})
            return self._loop(started)
        finally:
            self.case.close()


def model_call_bound(config: RunConfig, phases: int, substeps_per_phase: int) -> int:
    """Most model calls one run can make when every plan revision has the given shape.

    Counts each plan attempt (initial plus capped revisions): the planning call,
    its critique loop, up to ``per_phase_cap`` expansions per phase with their
    critique loops, and the sampling bound on code generation per substep. Every
    structured planning call may be repeated once with a format reminder.
    """
    from .sampling import LEVELS, Strategy

    fmt = 2
    n = config.critique.max_iterations
    judges = 2 if config.critique.dual_judge else 1
    r = config.refinement_budget
    codegen = (len(LEVELS) * (1 + r) if config.sampling is Strategy.UCT
               else 1 + len(LEVELS) * r)
    plan_block = fmt * (1 + ((n * judges + n - 1) if config.critique.plan else 0))
    expand_block = fmt * (1 + (n * judges if config.critique.expansion else 0) + n - 1)
    per_plan = plan_block + phases * config.per_phase_cap * (expand_block + substeps_per_phase * codegen)
    semantic = fmt if config.semantic_validation else 0
    return (config.plan_revision_cap + 1) * (per_plan + semantic)


def run_pipeline(task: TaskSpec, config: RunConfig, case_dir: Path | str, backend,
                 registry: Registry | None = None, clock=None) -> FinalResult:
    return Pipeline(task, config, backend, case_dir, registry, clock).run()


def load_task(path: Path | str) -> tuple[TaskSpec, dict]:
    """Read a task file: ``goal``, ``inputs`` (relative to the file) and optional ``config``."""
    import yaml

    path = Path(path)
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict) or "goal" not in data:
        raise ValueError(f"{path}: task file needs a 'goal'")
    inputs = [p if Path(p).is_absolute() else str(path.parent / p) for p in data.get("inputs", [])]
    return TaskSpec(str(data["goal"]), inputs), dict(data.get("config") or {})


__all__ = ["Pipeline", "FinalResult", "PlanningError", "ExpansionFailed", "DispatchError",
           "dispatch", "resolve_inputs", "run_pipeline", "load_task", "model_call_bound"]
