"""Progressive-sample validation of generated stage code.

Code is tried on escalating samples (10, 100, 1000 rows, then everything).
Two strategies drive the escalation: LINEAR promotes on success and refines
on failure; UCT picks among SCALE_UP / REFINE / RESTART / COMMIT with an
upper-confidence bandit whose exploration constant shrinks with depth. A
zero-cost critic scores cross-level stability and lets UCT commit before the
full-data level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import pandas as pd

from .contracts import Violation


class SamplingLevel(Enum):
    XS = 10
    S = 100
    M = 1000
    FULL = None

    @property
    def rows(self) -> int | None:
        return self.value

    @property
    def index(self) -> int:
        return LEVELS.index(self)

    def next(self) -> SamplingLevel | None:
        i = self.index + 1
        return LEVELS[i] if i < len(LEVELS) else None


LEVELS = (SamplingLevel.XS, SamplingLevel.S, SamplingLevel.M, SamplingLevel.FULL)

# Exploration multiplier per level: explore more where failures are cheap.
DEPTH_SCALE = {SamplingLevel.XS: 1.5, SamplingLevel.S: 1.2, SamplingLevel.M: 1.0,
               SamplingLevel.FULL: 0.8}
DEFAULT_C = math.sqrt(2)
DEFAULT_TAU = 0.92
DEPTH_SCORES = {1: 0.0, 2: 0.60, 3: 0.95}
ROW_STABILITY_TOL = 0.10
TIME_GROWTH_FACTOR = 2.0
# Stage timings below this are treated as equal; sub-millisecond noise is not scaling.
TIME_FLOOR_S = 0.05


def draw_sample(table: pd.DataFrame, level: SamplingLevel, seed: int) -> pd.DataFrame:
    """Uniform sample without replacement, kept in original row order.

    The row positions depend only on ``(len(table), level, seed)``, so equally
    long tables (for instance aligned time series) are sampled at the same
    positions and still join correctly.
    """
    n = len(table)
    if level is SamplingLevel.FULL or n <= level.rows:
        return table.copy()
    rng = np.random.default_rng([seed, level.index, n])
    positions = np.sort(rng.choice(n, size=level.rows, replace=False))
    return table.iloc[positions].copy()


class Action(Enum):
    SCALE_UP = "SCALE_UP"
    REFINE = "REFINE"
    RESTART = "RESTART"
    COMMIT = "COMMIT"


ACTION_ORDER = (Action.SCALE_UP, Action.REFINE, Action.RESTART, Action.COMMIT)


def uct_score(w: float, n: int, N: int, c: float) -> float:
    if n < 0:
        raise ValueError("visit count must be non-negative")
    if n == 0:
        return math.inf
    if N < 1:
        raise ValueError("parent visits must be at least 1")
    return w / n + c * math.sqrt(math.log(N) / n)


@dataclass
class UctStats:
    wins: dict[Action, float] = field(default_factory=lambda: {a: 0.0 for a in ACTION_ORDER})
    visits: dict[Action, int] = field(default_factory=lambda: {a: 0 for a in ACTION_ORDER})
    c: float = DEFAULT_C

    @property
    def parent_visits(self) -> int:
        return sum(self.visits.values())

    def update(self, action: Action, reward: float) -> None:
        self.wins[action] += reward
        self.visits[action] += 1


def effective_c(level: SamplingLevel, base_c: float) -> float:
    return base_c * DEPTH_SCALE[level]


def _argmax(scores: dict[Action, float]) -> Action:
    best = None
    for action in ACTION_ORDER:
        if action in scores and (best is None or scores[action] > scores[best]):
            best = action
    assert best is not None
    return best


def action_scores(stats: UctStats, level: SamplingLevel, base_c: float,
                  legal=ACTION_ORDER) -> dict[Action, float]:
    c = effective_c(level, base_c)
    N = stats.parent_visits
    return {a: uct_score(stats.wins[a], stats.visits[a], max(N, 1), c) for a in legal}


def select_action(stats: UctStats, level: SamplingLevel, base_c: float | None = None,
                  legal=ACTION_ORDER) -> Action:
    """Highest UCT score among ``legal``; ties go to the earlier action in
    SCALE_UP > REFINE > RESTART > COMMIT order."""
    base_c = stats.c if base_c is None else base_c
    return _argmax(action_scores(stats, level, base_c, legal))


@dataclass
class LevelResult:
    level: SamplingLevel
    success: bool
    schema_fingerprint: tuple[tuple[str, str], ...]
    rows_in: int
    rows_out: int
    elapsed_s: float
    violations: list[Violation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"level": self.level.name, "success": self.success,
                "schema": [list(p) for p in self.schema_fingerprint],
                "rows_in": self.rows_in, "rows_out": self.rows_out,
                "violations": [v.to_dict() for v in self.violations]}


def fingerprint(df: pd.DataFrame) -> tuple[tuple[str, str], ...]:
    return tuple((str(c), str(df[c].dtype)) for c in df.columns)


@dataclass(frozen=True)
class ConfidenceReport:
    schema_score: float
    row_score: float
    time_score: float
    depth_score: float
    composite: float
    commit: bool


def _rows_stable(results: list[LevelResult]) -> bool:
    outs = [r.rows_out for r in results]
    if len(set(outs)) == 1:
        return True
    ratios = [r.rows_out / r.rows_in if r.rows_in else math.inf for r in results]
    if any(math.isinf(x) for x in ratios):
        return False
    lo, hi = min(ratios), max(ratios)
    return hi == 0 or (hi - lo) <= ROW_STABILITY_TOL * hi


def _time_linear(results: list[LevelResult]) -> bool:
    for a, b in zip(results, results[1:]):
        if a.rows_in == 0:
            continue
        ta, tb = max(a.elapsed_s, TIME_FLOOR_S), max(b.elapsed_s, TIME_FLOOR_S)
        if tb / ta > TIME_GROWTH_FACTOR * max(b.rows_in / a.rows_in, 1.0):
            return False
    return True


def critic_confidence(results: list[LevelResult], tau: float = DEFAULT_TAU) -> ConfidenceReport:
    if not results:
        raise ValueError("critic needs at least one level result")
    schema = 1.0 if len({r.schema_fingerprint for r in results}) == 1 else 0.0
    rows = 1.0 if _rows_stable(results) else 0.0
    timing = 1.0 if _time_linear(results) else 0.0
    depth = DEPTH_SCORES.get(len(results), DEPTH_SCORES[3])
    composite = schema * rows * timing * depth
    return ConfidenceReport(schema, rows, timing, depth, composite, composite > tau)


class Strategy(str, Enum):
    LINEAR = "LINEAR"
    UCT = "UCT"


@dataclass(frozen=True)
class CodegenRequest:
    kind: str  # "initial", "refine" or "restart"
    level: SamplingLevel
    previous_code: str | None = None
    feedback: str | None = None


@dataclass
class Attempt:
    """What the driver's runner reports after executing code at one level.

    ``halt`` is set when the monitor's verdict takes the decision out of the
    validation loop ("retry", "abort" or "pause").
    """

    level_result: LevelResult
    ok: bool
    feedback: str = ""
    halt: str | None = None
    execution: object = None
    output: pd.DataFrame | None = None


@dataclass
class ValidationOutcome:
    success: bool
    accepted_code: str | None
    results: list[LevelResult]
    attempts: list[Attempt]
    revisions_used: int
    committed_early: bool = False
    failure_reason: str | None = None
    codegen_calls: int = 0

    @property
    def last(self) -> Attempt | None:
        return self.attempts[-1] if self.attempts else None


Codegen = Callable[[CodegenRequest], str]
Runner = Callable[[str, SamplingLevel], Attempt]


def _noop(kind: str, payload: dict) -> None:
    pass


def run_validation(substep, codegen: Codegen, runner: Runner,
                   strategy: Strategy = Strategy.LINEAR, refinement_budget: int = 3,
                   base_c: float = DEFAULT_C, tau: float = DEFAULT_TAU, early_stop: bool = False,
                   on_event: Callable[[str, dict], None] = _noop) -> ValidationOutcome:
    """Validate one substep's code across sampling levels.

    ``substep`` is only used for event payloads; ``codegen`` produces code for a
    request and ``runner`` executes code at a level. Under LINEAR the critic is
    consulted only when ``early_stop`` is set; under UCT it gates COMMIT.
    """
    if refinement_budget < 0:
        raise ValueError("refinement budget must be non-negative")
    sid = getattr(substep, "id", str(substep))
    max_calls = len(LEVELS) * (1 + refinement_budget)
    state = {"calls": 0}
    attempts: list[Attempt] = []

    def generate(request: CodegenRequest) -> str:
        state["calls"] += 1
        on_event("codegen", {"substep": sid, "request": request.kind, "level": request.level.name,
                             "call": state["calls"]})
        return codegen(request)

    def run(code: str, level: SamplingLevel) -> Attempt:
        attempt = runner(code, level)
        attempts.append(attempt)
        on_event("attempt", {"substep": sid, "level": level.name, "ok": attempt.ok,
                             "halt": attempt.halt, **attempt.level_result.to_dict()})
        return attempt

    def outcome(success: bool, code: str | None, results, committed=False, reason=None):
        out = ValidationOutcome(success, code if success else None, list(results), attempts,
                                revisions_used=state["calls"] - 1, committed_early=committed,
                                failure_reason=reason, codegen_calls=state["calls"])
        on_event("done", {"substep": sid, "success": success, "revisions": out.revisions_used,
                           "committed_early": committed, "reason": reason,
                           "levels": [r.level.name for r in out.results]})
        return out

    level = SamplingLevel.XS
    code = generate(CodegenRequest("initial", level))
    results: list[LevelResult] = []
    refinements = {lvl: 0 for lvl in LEVELS}

    if strategy is Strategy.LINEAR:
        while True:
            attempt = run(code, level)
            if attempt.halt:
                return outcome(False, code, results, reason=attempt.halt)
            if attempt.ok:
                results.append(attempt.level_result)
                nxt = level.next()
                if nxt is None:
                    return outcome(True, code, results)
                if early_stop and critic_confidence(results, tau).commit:
                    return outcome(True, code, results, committed=True)
                level = nxt
                continue
            if refinements[level] >= refinement_budget:
                return outcome(False, code, results, reason="budget exhausted")
            refinements[level] += 1
            code = generate(CodegenRequest("refine", level, code, attempt.feedback))

    stats = UctStats(c=base_c)
    attempt = run(code, level)
    while True:
        if attempt.halt:
            return outcome(False, code, results, reason=attempt.halt)
        if attempt.ok:
            results.append(attempt.level_result)
            if level.next() is None:
                return outcome(True, code, results)
            legal = [Action.SCALE_UP]
            if critic_confidence(results, tau).commit:
                legal.append(Action.COMMIT)
        else:
            if refinements[level] >= refinement_budget or state["calls"] >= max_calls:
                return outcome(False, code, results, reason="budget exhausted")
            legal = [Action.REFINE, Action.RESTART]
        action = select_action(stats, level, base_c, legal)
        on_event("uct_select", {"substep": sid, "level": level.name, "action": action.value,
                                "legal": [a.value for a in legal]})
        if action is Action.COMMIT:
            stats.update(action, 1.0)
            return outcome(True, code, results, committed=True)
        if action is Action.SCALE_UP:
            level = level.next()
        elif action is Action.REFINE:
            refinements[level] += 1
            code = generate(CodegenRequest("refine", level, code, attempt.feedback))
        else:
            refinements[level] += 1
            code = generate(CodegenRequest("restart", SamplingLevel.XS, code, attempt.feedback))
            level = SamplingLevel.XS
            results = []
        attempt = run(code, level)
        stats.update(action, 1.0 if attempt.ok else 0.0)
