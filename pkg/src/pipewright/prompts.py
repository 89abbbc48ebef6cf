"""Prompt blocks for the planning, expansion and coding calls, and parsers for
the fenced-YAML documents the model answers with."""
from __future__ import annotations

import re
from typing import Iterable, Sequence

import yaml

from .contracts import SchemaContract, render_contract
from .gateway import PromptBlock, project_columns
from .model import DataProfile, FailureRecord, Phase, Plan, Substep
from .recovery import CritiqueResult, Issue, Severity
from .sandbox import ALLOWED_MODULES

# Minimal registry of reusable ground-agent templates.
AGENT_TEMPLATES = {
    "DataProcessor": "cleans, parses, converts or reshapes tables row by row",
    "Joiner": "combines two or more tables on keys or by spatial/temporal proximity",
    "Aggregator": "groups and summarizes rows into statistics",
    "AnswerFormatter": "shapes the final answer table (one row per answer, named columns)",
}

PLAN_FORMAT = """Answer with one fenced YAML document:
```yaml
phases:
  - id: short_snake_case_id
    objective: what this phase produces
    rationale: why it comes here
```"""

EXPANSION_FORMAT = """Answer with one fenced YAML document listing 1 to 3 substeps:
```yaml
substeps:
  - id: unique_snake_case_id
    agent_type: DataProcessor | Joiner | Aggregator | AnswerFormatter
    objective: one concrete transformation
    inputs: [table or substep ids, in argument order]
    depends_on: [substep ids]
    hints: [implementation hints]
    contract:
      required_inputs: {column: integer|real|numeric|text|boolean|datetime|any}
      columns_add: {column: type}
      columns_preserve: [column]
      columns_remove: [column]
      value_constraints: {column: [{kind: range, lo: 0, hi: 10}]}
      row_relation: SAME | LESS | GREATER | ANY
```"""

CRITIQUE_FORMAT = """Answer with one fenced YAML document:
```yaml
severity: NONE | MINOR | MAJOR | CRITICAL
issues:
  - description: what is wrong
    target: phase or substep id
```"""

PLAN_CHECKLIST = ("Check the plan for: phase ordering that respects data dependencies; "
                  "coverage of every part of the goal; phases scoped to one purpose each; "
                  "no redundant phases.")
EXPANSION_CHECKLIST = ("Check the substeps for: input columns available from predecessors or "
                       "the original inputs; substep count within 1 to 3; contracts that "
                       "match each objective; agent types suited to each objective.")
FORMAT_REMINDER = ("Your previous answer could not be parsed. Reply with exactly one fenced "
                   "```yaml block in the requested format and nothing else.")


class ParseError(ValueError):
    pass


_FENCE = re.compile(r"```([A-Za-z]*)[ \t]*\n(.*?)```", re.S)


def _fenced(text: str, langs: Iterable[str]) -> str | None:
    langs = set(langs)
    for lang, body in _FENCE.findall(text):
        if lang.lower() in langs:
            return body
    return None


def parse_yaml_doc(text: str) -> dict:
    body = _fenced(text, ("yaml", "yml", ""))
    try:
        data = yaml.safe_load(body if body is not None else text)
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError("expected a YAML mapping")
    return data


def parse_plan(text: str, revision: int = 0) -> Plan:
    data = parse_yaml_doc(text)
    phases = data.get("phases")
    if not isinstance(phases, list) or not phases:
        raise ParseError("plan needs a non-empty 'phases' list")
    try:
        return Plan([Phase(id=str(p["id"]), objective=str(p.get("objective", "")),
                           rationale=str(p.get("rationale", ""))) for p in phases], revision)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed plan: {exc}") from exc


def parse_substeps(text: str) -> list[Substep]:
    data = parse_yaml_doc(text)
    items = data.get("substeps")
    if not isinstance(items, list) or not items:
        raise ParseError("expansion needs a non-empty 'substeps' list")
    try:
        return [Substep.from_dict(s) for s in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed substep: {exc}") from exc


def parse_critique(text: str) -> CritiqueResult:
    data = parse_yaml_doc(text)
    try:
        severity = Severity.parse(data.get("severity", ""))
    except KeyError as exc:
        raise ParseError(f"unknown severity {data.get('severity')!r}") from exc
    issues = tuple(Issue(str(i.get("description", "")), i.get("target"))
                   if isinstance(i, dict) else Issue(str(i))
                   for i in data.get("issues") or [])
    return CritiqueResult(severity, () if severity is Severity.NONE else issues)


def parse_semantic(text: str) -> tuple[str, str]:
    data = parse_yaml_doc(text)
    verdict = str(data.get("verdict", "")).strip().lower()
    if verdict not in ("plausible", "replan", "implausible"):
        raise ParseError(f"unknown verdict {verdict!r}")
    return ("plausible" if verdict == "plausible" else "replan"), str(data.get("reason", ""))


def extract_code(text: str) -> str:
    body = _fenced(text, ("python", "py"))
    if body is None:
        body = _fenced(text, ("",))
    return (body if body is not None else text).strip() + "\n"


# prompt builders -------------------------------------------------------------------

def schema_block(profile: DataProfile, goal: str, cap: int = 30) -> str:
    """Per-table column metadata, projected to the goal on wide tables. No row values."""
    lines = []
    for f in profile.files:
        header = "with header" if f.has_header else "headerless"
        lines.append(f"Table `{f.name}` ({f.row_count} rows, {header}):")
        by_name = {c.name: c for c in f.columns}
        keep = project_columns([c.name for c in f.columns], goal, cap)
        for name in keep:
            c = by_name[name]
            rng = f", range {c.min} to {c.max}" if c.min is not None else ""
            lines.append(f"  - {c.name}: {c.inferred_type.value}, {c.null_rate:.0%} null{rng}")
        if len(keep) < len(f.columns):
            lines.append(f"  ({len(f.columns) - len(keep)} columns not shown)")
        for w in f.warnings:
            lines.append(f"  warning: {w}")
    return "\n".join(lines)


def failure_log_block(log: Sequence[FailureRecord]) -> str:
    lines = ["Failures from earlier attempts (avoid repeating them):"]
    for r in log:
        where = f"{r.phase_id}/{r.substep_id}" if r.substep_id else r.phase_id
        lines.append(f"- {where} [{r.category}] {r.message}")
    return "\n".join(lines)


def planning_blocks(goal: str, profile: DataProfile, guidance: Sequence[str],
                    failure_log: Sequence[FailureRecord], warnings: Sequence[str]) -> list[PromptBlock]:
    blocks = [
        PromptBlock("task", 0, f"Plan a data pipeline for this goal:\n{goal}\n\n"
                               "Split the work into a short linear sequence of phases.\n"
                               + PLAN_FORMAT),
        PromptBlock("schema", 1, schema_block(profile, goal)),
    ]
    if failure_log:
        blocks.append(PromptBlock("failure_log", 1, failure_log_block(failure_log)))
    if guidance:
        blocks.append(PromptBlock("domain_guidance", 2, "Domain guidance:\n"
                                  + "\n".join(f"- {g}" for g in guidance)))
    if warnings:
        blocks.append(PromptBlock("prior_patterns", 3, "Recurring failures in earlier runs:\n"
                                  + "\n".join(f"- {w}" for w in warnings)))
    return blocks


def plan_text(plan: Plan) -> str:
    return yaml.safe_dump({"phases": [{"id": p.id, "objective": p.objective,
                                       "rationale": p.rationale} for p in plan.phases]},
                          sort_keys=False)


def plan_critique_blocks(goal: str, plan: Plan) -> list[PromptBlock]:
    return [PromptBlock("critique", 0, f"Goal: {goal}\n\nPlan:\n{plan_text(plan)}\n"
                                       f"{PLAN_CHECKLIST}\n{CRITIQUE_FORMAT}")]


def plan_revise_blocks(goal: str, plan: Plan, critique: CritiqueResult) -> list[PromptBlock]:
    issues = "\n".join(f"- ({i.target}) {i.description}" for i in critique.issues)
    return [PromptBlock("revise", 0, f"Goal: {goal}\n\nPlan:\n{plan_text(plan)}\n"
                                     f"Critique ({critique.severity.name}):\n{issues}\n\n"
                                     f"Revise the plan.\n{PLAN_FORMAT}")]


def agents_block() -> str:
    return "Ground-agent types:\n" + "\n".join(f"- {k}: {v}" for k, v in AGENT_TEMPLATES.items())


def expansion_blocks(goal: str, plan: Plan, phase: Phase, tables_view: str,
                     guidance: str, warnings: Sequence[str]) -> list[PromptBlock]:
    position = plan.phase_index(phase.id) + 1
    blocks = [
        PromptBlock("phase", 0, f"Goal: {goal}\nExpand phase {position} of {len(plan.phases)} "
                                f"`{phase.id}`: {phase.objective}\n{EXPANSION_FORMAT}"),
        PromptBlock("tables", 1, tables_view),
    ]
    if phase.hints:
        blocks.append(PromptBlock("phase_hints", 1, "Carry these into the new expansion:\n"
                                  + "\n".join(f"- {h}" for h in phase.hints)))
    if guidance:
        blocks.append(PromptBlock("domain_guidance", 2, guidance))
    blocks.append(PromptBlock("agents", 3, agents_block()))
    if warnings:
        blocks.append(PromptBlock("prior_patterns", 4, "Recurring failures in earlier runs:\n"
                                  + "\n".join(f"- {w}" for w in warnings)))
    return blocks


def substeps_text(substeps: Sequence[Substep]) -> str:
    return yaml.safe_dump({"substeps": [s.to_dict() for s in substeps]}, sort_keys=False)


def expansion_critique_blocks(phase: Phase, substeps: Sequence[Substep], tables_view: str,
                              structural: Sequence[Issue]) -> list[PromptBlock]:
    found = ""
    if structural:
        found = "\nAutomatic checks already found:\n" + "\n".join(
            f"- ({i.target}) {i.description}" for i in structural)
    return [
        PromptBlock("critique", 0, f"Phase `{phase.id}`: {phase.objective}\n\nSubsteps:\n"
                                   f"{substeps_text(substeps)}{found}\n{EXPANSION_CHECKLIST}\n"
                                   f"{CRITIQUE_FORMAT}"),
        PromptBlock("tables", 1, tables_view),
    ]


def expansion_revise_blocks(phase: Phase, substeps: Sequence[Substep],
                            critique: CritiqueResult, tables_view: str) -> list[PromptBlock]:
    issues = "\n".join(f"- ({i.target}) {i.description}" for i in critique.issues)
    return [
        PromptBlock("revise", 0, f"Phase `{phase.id}`: {phase.objective}\n\nSubsteps:\n"
                                 f"{substeps_text(substeps)}\nCritique ({critique.severity.name}):"
                                 f"\n{issues}\n\nRevise the substeps.\n{EXPANSION_FORMAT}"),
        PromptBlock("tables", 1, tables_view),
    ]


def stage_function_name(substep_id: str) -> str:
    return "stage_" + re.sub(r"\W+", "_", substep_id).strip("_").lower()


def arg_name(ref: str) -> str:
    name = re.sub(r"\W+", "_", ref).strip("_").lower() or "table"
    return ("t_" + name) if name[0].isdigit() else name


def codegen_blocks(substep: Substep, refs: Sequence[str], inputs_view: str, hints: Sequence[str],
                   guidance: str, feedback: str | None, warnings: Sequence[str]) -> list[PromptBlock]:
    signature = f"def {stage_function_name(substep.id)}({', '.join(arg_name(r) for r in refs)}):"
    blocks = [
        PromptBlock("task", 0,
                    f"Write one Python function for this {substep.agent_type} step:\n"
                    f"{substep.objective}\n\n{signature}\n"
                    "Each argument is a pandas DataFrame; return one DataFrame. `pd`, `np`, "
                    "`math`, `re` and `datetime` are available. Do not read or write files. "
                    "Answer with one ```python block."),
        PromptBlock("contract", 0, render_contract(substep.contract)),
        PromptBlock("inputs", 1, inputs_view),
    ]
    if feedback:
        blocks.append(PromptBlock("feedback", 1, "The previous attempt failed:\n" + feedback))
    if hints:
        blocks.append(PromptBlock("hints", 2, "Hints:\n" + "\n".join(f"- {h}" for h in hints)))
    if guidance:
        blocks.append(PromptBlock("domain_guidance", 3, guidance))
    if warnings:
        blocks.append(PromptBlock("prior_patterns", 4, "Recurring failures in earlier runs:\n"
                                  + "\n".join(f"- {w}" for w in warnings)))
    blocks.append(PromptBlock("tools", 5, "Importable modules: "
                              + ", ".join(sorted(ALLOWED_MODULES))))
    return blocks


def semantic_blocks(goal: str, profile: DataProfile, answer: str) -> list[PromptBlock]:
    return [
        PromptBlock("check", 0, f"Goal: {goal}\n\nPipeline answer:\n{answer}\n\n"
                                "Is this answer plausible for the goal and data? Answer with a "
                                "fenced YAML document: `verdict: plausible` or `verdict: replan`, "
                                "plus `reason:`."),
        PromptBlock("profile", 1, profile.summary),
    ]


def contract_only_view(ref: str, producer: Substep, base_columns: Sequence[str]) -> str:
    """Describe a predecessor output by its contract alone."""
    cols = SchemaContract.output_columns(producer.contract, base_columns)
    return (f"Table `{ref}` (output of {producer.id}; described by its contract):\n"
            f"  expected columns: {', '.join(cols) if cols else 'unspecified'}\n"
            + "\n".join("  " + ln for ln in render_contract(producer.contract).splitlines()))
