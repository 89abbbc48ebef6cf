"""Case folders: the append-only record of one pipeline run.

Layout::

    <case>/
      events.jsonl          one JSON record per line, append-only
      config.json           run configuration snapshot
      checkpoints/<id>/     <table>.csv + <table>.schema.json, plan.json, meta.json
      code/<substep>/r<k>.py
      final/output.csv      final output table (+ schema sidecar)
      pipeline.json         accepted stages in execution order
      pipeline.py           assembled standalone script
      summary.json          run totals and outcome
"""
from __future__ import annotations

import inspect
import json
import re
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

import pandas as pd

from . import _loader
from .model import Actor, CaseEvent, DataProfile, Plan, PipelineState
from .sandbox import discover_stage_functions

EVENTS_FILE = "events.jsonl"
# Payload key holding wall-clock measurements; ignored by determinism checks.
TIMING_KEY = "timing"


class CaseError(Exception):
    pass


class CaseClosedError(CaseError):
    pass


class CheckpointExistsError(CaseError):
    pass


class MissingCheckpointError(CaseError):
    pass


def _now_ms() -> int:
    return time.time_ns() // 1_000_000


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def write_table(df: pd.DataFrame, csv_path: Path) -> None:
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    schema = {"columns": [{"name": str(c), "dtype": str(df[c].dtype)} for c in df.columns]}
    csv_path.write_bytes(df.to_csv(index=False, lineterminator="\n").encode("utf-8"))
    csv_path.with_suffix(".schema.json").write_text(json.dumps(schema, indent=1))


def read_table_snapshot(csv_path: Path) -> pd.DataFrame:
    schema = json.loads(csv_path.with_suffix(".schema.json").read_text())
    cols = schema["columns"]
    if not cols:
        return pd.DataFrame()
    names = [c["name"] for c in cols]
    raw = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    raw.columns = names
    data = {}
    for c in cols:
        s, dtype = raw[c["name"]], c["dtype"]
        empty = s == ""
        if dtype.startswith("datetime64"):
            data[c["name"]] = pd.to_datetime(s.where(~empty), format="mixed").astype(dtype)
        elif dtype == "bool":
            data[c["name"]] = s.map({"True": True, "False": False}).astype(bool)
        elif dtype == "boolean":
            data[c["name"]] = s.map({"True": True, "False": False}).astype("boolean")
        elif dtype in ("float64", "float32"):
            # numpy's parser round-trips every repr exactly; pd.to_numeric does not
            data[c["name"]] = s.where(~empty, "nan").astype(dtype)
        elif dtype in ("int64", "int32", "Int64"):
            data[c["name"]] = pd.to_numeric(s.where(~empty)).astype(dtype)
        else:
            data[c["name"]] = s.astype(object).where(~empty, None)
    return pd.DataFrame(data, columns=names)


def table_bytes(df: pd.DataFrame) -> bytes:
    return df.to_csv(index=False, lineterminator="\n").encode("utf-8")


@dataclass(frozen=True)
class Checkpoint:
    id: str
    path: Path
    tables: tuple[str, ...]
    plan: dict | None


def read_events(path: Path) -> tuple[list[CaseEvent], list[str]]:
    """Tolerant reader: returns the events that parse plus one note per bad line."""
    events, errors = [], []
    events_file = Path(path) / EVENTS_FILE if Path(path).is_dir() else Path(path)
    with open(events_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                events.append(CaseEvent.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(f"line {lineno}: {exc}")
    return events, errors


def event_signature(events: list[CaseEvent]) -> list[dict]:
    """Events with timestamps and timing payloads stripped, for determinism checks."""
    out = []
    for e in events:
        payload = {k: v for k, v in e.payload.items() if k != TIMING_KEY}
        out.append({"seq": e.seq, "actor": e.actor.value, "kind": e.kind, "payload": payload})
    return out


class CaseFolder:
    """Single-writer, many-reader record of one run."""

    def __init__(self, root: Path | str, clock: Callable[[], int] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._clock = clock or _now_ms
        self._lock = threading.Lock()
        self._closed = False
        self._seq = 0
        self._last_ts = 0
        events_path = self.root / EVENTS_FILE
        if events_path.exists():
            existing, _ = read_events(events_path)
            if existing:
                self._seq = existing[-1].seq + 1
                self._last_ts = existing[-1].timestamp
        self._fh = open(events_path, "a", encoding="utf-8")

    # events -----------------------------------------------------------------
    def append_event(self, event: CaseEvent) -> CaseEvent:
        with self._lock:
            return self._append(event)

    def _append(self, event: CaseEvent) -> CaseEvent:
        if self._closed:
            raise CaseClosedError(f"case folder {self.root} is closed")
        if event.timestamp < self._last_ts:
            raise ValueError(f"event timestamp {event.timestamp} precedes {self._last_ts}")
        stored = replace(event, seq=self._seq)
        self._fh.write(json.dumps(stored.to_record(), sort_keys=True, default=str) + "\n")
        self._fh.flush()
        self._seq += 1
        self._last_ts = event.timestamp
        return stored

    def emit(self, actor: Actor, kind: str, payload: dict | None = None) -> CaseEvent:
        with self._lock:
            # A clock that steps backwards is clamped so timestamps never decrease.
            ts = max(self._clock(), self._last_ts)
            return self._append(CaseEvent(ts, Actor(actor), kind, payload or {}))

    def events(self) -> list[CaseEvent]:
        return read_events(self.root)[0]

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._fh.close()
                self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    def __enter__(self) -> CaseFolder:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # artifacts --------------------------------------------------------------
    def write_json(self, name: str, obj: Any) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
        return path

    def read_json(self, name: str) -> Any:
        return json.loads((self.root / name).read_text())

    def write_code(self, substep_id: str, code: str) -> int:
        d = self.root / "code" / _safe(substep_id)
        d.mkdir(parents=True, exist_ok=True)
        rev = len(list(d.glob("r*.py")))
        (d / f"r{rev}.py").write_text(code)
        return rev

    def write_checkpoint(self, cp_id: str, tables: dict[str, pd.DataFrame],
                         plan: Plan | None) -> Checkpoint:
        d = self.root / "checkpoints" / _safe(cp_id)
        if d.exists():
            raise CheckpointExistsError(f"checkpoint {cp_id!r} already exists")
        d.mkdir(parents=True)
        for name, df in tables.items():
            write_table(df, d / f"{_safe(name)}.csv")
        plan_dict = plan.to_dict() if plan is not None else None
        (d / "plan.json").write_text(json.dumps(plan_dict, indent=1))
        (d / "meta.json").write_text(json.dumps({"id": cp_id, "tables": list(tables)}, indent=1))
        return Checkpoint(cp_id, d, tuple(tables), plan_dict)

    def restore_checkpoint(self, cp_id: str) -> tuple[dict[str, pd.DataFrame], Plan | None]:
        d = self.root / "checkpoints" / _safe(cp_id)
        if not d.exists():
            raise MissingCheckpointError(f"no checkpoint {cp_id!r}")
        meta = json.loads((d / "meta.json").read_text())
        tables = {name: read_table_snapshot(d / f"{_safe(name)}.csv") for name in meta["tables"]}
        plan_dict = json.loads((d / "plan.json").read_text())
        return tables, (Plan.from_dict(plan_dict) if plan_dict else None)

    def discard_checkpoint(self, cp_id: str) -> None:
        """Move a discarded phase's checkpoint out of the active namespace."""
        d = self.root / "checkpoints" / _safe(cp_id)
        if d.exists():
            graveyard = self.root / "discarded"
            graveyard.mkdir(exist_ok=True)
            n = len(list(graveyard.iterdir()))
            d.rename(graveyard / f"{n:03d}-{_safe(cp_id)}")


def checkpoint(state: PipelineState, case: CaseFolder, cp_id: str,
               tables: dict[str, pd.DataFrame], plan: Plan | None) -> PipelineState:
    if cp_id in state.checkpoints:
        raise CheckpointExistsError(f"checkpoint {cp_id!r} already exists")
    cp = case.write_checkpoint(cp_id, tables, plan)
    checkpoints = dict(state.checkpoints)
    checkpoints[cp_id] = cp
    return replace(state, checkpoints=checkpoints)


# assembly ---------------------------------------------------------------------

def _stage_fn_name(substep_id: str) -> str:
    return "stage_" + re.sub(r"\W+", "_", substep_id).strip("_").lower()


def _rename_stage(code: str, new_name: str) -> str:
    found = discover_stage_functions(code)
    if not found.names:
        raise CaseError("accepted program has no stage_ function")
    return re.sub(rf"\b{re.escape(found.names[0])}\b", new_name, code)


def assemble_pipeline(case: CaseFolder | Path) -> str:
    """Build a standalone script from a finished run's accepted stage programs.

    Running ``python pipeline.py OUT.csv`` re-reads the original inputs and
    writes the final output table.
    """
    root = case.root if isinstance(case, CaseFolder) else Path(case)
    manifest_path = root / "pipeline.json"
    summary_path = root / "summary.json"
    if not manifest_path.exists() or not summary_path.exists():
        raise CaseError("pipeline has not finished")
    if not json.loads(summary_path.read_text()).get("success"):
        raise CaseError("pipeline did not finish successfully; refusing to assemble")
    manifest = json.loads(manifest_path.read_text())
    profile = DataProfile.from_dict(manifest["profile"])

    loader_src = inspect.getsource(_loader).split('"""', 2)[2].strip()
    lines = [
        "#!/usr/bin/env python3",
        '"""Standalone pipeline assembled from a recorded run.',
        "",
        "Usage: python pipeline.py [OUTPUT.csv] [--inputs-dir DIR]",
        '"""',
        "import datetime",
        "import math",
        "import re",
        "import sys",
        "",
        "import numpy as np",
        loader_src,
        "",
        "INPUTS = {",
    ]
    for f in profile.files:
        spec = {"path": f.path, "delimiter": f.delimiter, "has_header": f.has_header,
                "columns": f.column_names, "types": f.column_types}
        lines.append(f"    {f.name!r}: {spec!r},")
    lines += ["}", ""]

    calls = []
    for stage in manifest["stages"]:
        fn = _stage_fn_name(stage["substep_id"])
        lines.append(f"# ---- {stage['substep_id']} ({stage['agent_type']}): {stage['objective']}")
        lines.append(_rename_stage(stage["code"], fn).rstrip())
        lines.append("")
        args = ", ".join(f"tables[{ref!r}].copy()" for ref in stage["inputs"])
        calls.append(f"    tables[{stage['output']!r}] = {fn}({args})")

    lines += [
        "",
        "def main(argv):",
        "    inputs_dir = None",
        "    if '--inputs-dir' in argv:",
        "        i = argv.index('--inputs-dir')",
        "        inputs_dir = argv[i + 1]",
        "        argv = argv[:i] + argv[i + 2:]",
        "    tables = {}",
        "    for name, spec in INPUTS.items():",
        "        spec = dict(spec)",
        "        if inputs_dir:",
        "            spec['path'] = os.path.join(inputs_dir, os.path.basename(spec['path']))",
        "        tables[name] = read_table(**spec)",
        *calls,
        f"    out = tables[{manifest['final']!r}]",
        "    target = argv[1] if len(argv) > 1 else sys.stdout",
        "    out.to_csv(target, index=False, lineterminator='\\n')",
        "",
        "",
        "if __name__ == '__main__':",
        "    main(sys.argv)",
        "",
    ]
    script = "\n".join(lines)
    (root / "pipeline.py").write_text(script)
    return script
