"""Domain types shared across the engine."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from .contracts import SchemaContract


class ColumnType(str, Enum):
    INTEGER = "integer"
    REAL = "real"
    TEXT = "text"
    BOOLEAN = "boolean"
    DATETIME = "datetime"
    UNKNOWN = "unknown"


class Stage(str, Enum):
    """The six stages of a pipeline build, in execution order."""

    DATA_UNDERSTANDING = "data_understanding"
    PLANNING = "planning"
    CRITIQUE = "critique"
    EXPANSION = "expansion"
    EXECUTION = "execution"
    FINALIZATION = "finalization"


class Actor(str, Enum):
    ORCHESTRATOR = "orchestrator"
    ARCHITECT = "architect"
    MONITOR = "monitor"
    GROUND_AGENT = "ground-agent"
    CLI = "cli"


# Known ground-agent types; plans may name others.
AGENT_TYPES = ("DataProcessor", "Aggregator", "AnswerFormatter", "Joiner")

DATA_UNDERSTANDING = "data-understanding"


@dataclass(frozen=True)
class ColumnProfile:
    name: str
    inferred_type: ColumnType
    null_rate: float
    distinct_count: int
    min: Any = None
    max: Any = None
    sample_values: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inferred_type"] = self.inferred_type.value
        d["sample_values"] = list(self.sample_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ColumnProfile:
        return cls(
            name=d["name"],
            inferred_type=ColumnType(d["inferred_type"]),
            null_rate=d["null_rate"],
            distinct_count=d["distinct_count"],
            min=d.get("min"),
            max=d.get("max"),
            sample_values=tuple(d.get("sample_values", ())),
        )


@dataclass(frozen=True)
class FileProfile:
    """Profile of one input file, plus what is needed to read it back."""

    path: str
    name: str
    row_count: int
    has_header: bool
    delimiter: str
    columns: tuple[ColumnProfile, ...]
    warnings: tuple[str, ...] = ()

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def column_types(self) -> list[str]:
        return [c.inferred_type.value for c in self.columns]

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "name": self.name,
            "row_count": self.row_count,
            "has_header": self.has_header,
            "delimiter": self.delimiter,
            "columns": [c.to_dict() for c in self.columns],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FileProfile:
        return cls(
            path=d["path"],
            name=d["name"],
            row_count=d["row_count"],
            has_header=d["has_header"],
            delimiter=d["delimiter"],
            columns=tuple(ColumnProfile.from_dict(c) for c in d["columns"]),
            warnings=tuple(d.get("warnings", ())),
        )


@dataclass(frozen=True)
class DataProfile:
    files: tuple[FileProfile, ...]
    summary: str

    def file(self, name: str) -> FileProfile:
        for f in self.files:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"files": [f.to_dict() for f in self.files], "summary": self.summary}

    @classmethod
    def from_dict(cls, d: dict) -> DataProfile:
        return cls(tuple(FileProfile.from_dict(f) for f in d["files"]), d["summary"])


@dataclass
class TaskSpec:
    goal: str
    inputs: list[Path]
    run_config: Any = None

    def __post_init__(self) -> None:
        self.inputs = [Path(p) for p in self.inputs]

    def validate(self) -> None:
        if not self.goal or not self.goal.strip():
            raise ValueError("task goal must be non-empty")
        if not self.inputs:
            raise ValueError("task needs at least one input file")
        for p in self.inputs:
            if not p.exists():
                raise FileNotFoundError(f"input file not found: {p}")


@dataclass
class Substep:
    id: str
    agent_type: str
    objective: str
    hints: list[str] = field(default_factory=list)
    contract: SchemaContract = field(default_factory=SchemaContract)
    depends_on: list[str] = field(default_factory=list)
    # Explicit table references (input file names or substep ids). When empty the
    # substep reads its dependencies' outputs, or the phase's active input.
    inputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "agent_type": self.agent_type,
            "objective": self.objective,
            "hints": list(self.hints),
            "contract": self.contract.to_dict(),
            "depends_on": list(self.depends_on),
            "inputs": list(self.inputs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Substep:
        return cls(
            id=str(d["id"]),
            agent_type=str(d.get("agent_type", "DataProcessor")),
            objective=str(d.get("objective", "")),
            hints=[str(h) for h in d.get("hints") or []],
            contract=SchemaContract.from_dict(d.get("contract") or {}),
            depends_on=[str(x) for x in d.get("depends_on") or []],
            inputs=[str(x) for x in d.get("inputs") or []],
        )


@dataclass
class Phase:
    id: str
    objective: str
    rationale: str = ""
    substeps: list[Substep] = field(default_factory=list)
    # Evidence carried into re-expansion after a phase-level backtrack.
    hints: list[str] = field(default_factory=list)

    @property
    def expanded(self) -> bool:
        return bool(self.substeps)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "objective": self.objective,
            "rationale": self.rationale,
            "substeps": [s.to_dict() for s in self.substeps],
            "hints": list(self.hints),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Phase:
        return cls(
            id=str(d["id"]),
            objective=str(d.get("objective", "")),
            rationale=str(d.get("rationale", "")),
            substeps=[Substep.from_dict(s) for s in d.get("substeps") or []],
            hints=[str(h) for h in d.get("hints") or []],
        )


@dataclass
class Plan:
    phases: list[Phase]
    revision: int = 0

    def __post_init__(self) -> None:
        if not self.phases:
            raise ValueError("a plan needs at least one phase")
        ids = [p.id for p in self.phases]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate phase ids: {ids}")

    def phase(self, phase_id: str) -> Phase:
        for p in self.phases:
            if p.id == phase_id:
                return p
        raise KeyError(phase_id)

    def phase_index(self, phase_id: str) -> int:
        return [p.id for p in self.phases].index(phase_id)

    def substeps(self) -> list[Substep]:
        return [s for p in self.phases for s in p.substeps]

    def phase_of(self, substep_id: str) -> Phase:
        for p in self.phases:
            if any(s.id == substep_id for s in p.substeps):
                return p
        raise KeyError(substep_id)

    def snapshot(self) -> Plan:
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {"revision": self.revision, "phases": [p.to_dict() for p in self.phases]}

    @classmethod
    def from_dict(cls, d: dict) -> Plan:
        return cls([Phase.from_dict(p) for p in d.get("phases") or []], int(d.get("revision", 0)))


@dataclass(frozen=True)
class FailureRecord:
    phase_id: str
    substep_id: str | None
    kind: str
    category: str
    message: str
    level: str | None = None
    revisions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FailureRecord:
        return cls(**{k: d.get(k) for k in ("phase_id", "substep_id", "kind", "category",
                                            "message", "level")}, revisions=d.get("revisions", 0))


@dataclass
class CostLedger:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CaseEvent:
    timestamp: int  # milliseconds since the epoch
    actor: Actor
    kind: str
    payload: dict = field(default_factory=dict)
    seq: int = -1

    def to_record(self) -> dict:
        return {"seq": self.seq, "ts": self.timestamp, "actor": self.actor.value,
                "kind": self.kind, "payload": self.payload}

    @classmethod
    def from_record(cls, r: dict) -> CaseEvent:
        return cls(timestamp=int(r["ts"]), actor=Actor(r["actor"]), kind=str(r["kind"]),
                   payload=r.get("payload") or {}, seq=int(r["seq"]))


@dataclass
class PipelineState:
    """Mutable run state owned by one pipeline driver."""

    current_stage: Stage = Stage.DATA_UNDERSTANDING
    checkpoints: dict[str, Any] = field(default_factory=dict)
    failure_log: list[FailureRecord] = field(default_factory=list)
    cost_ledger: CostLedger = field(default_factory=CostLedger)
    profile: DataProfile | None = None
    plan: Plan | None = None
    # Tables visible to the next substep: input names and completed substep ids.
    active: dict[str, Any] = field(default_factory=dict)
    completed: list[str] = field(default_factory=list)
    phase_failures: dict[str, int] = field(default_factory=dict)
    plan_backtracks: int = 0

    def log_failure(self, record: FailureRecord) -> None:
        self.failure_log.append(record)
