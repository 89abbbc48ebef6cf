from __future__ import annotations

import json
from pathlib import Path

import pytest

from pipewright.agents import Pipeline, load_task
from pipewright.case import event_signature, read_events
from pipewright.config import resolve_config
from pipewright.gateway import Playbook, ScriptedBackend

FIXTURES = Path(__file__).parent / "fixtures"


class RecordingBackend(ScriptedBackend):
    """Scripted backend that keeps every prompt it was sent."""

    def __init__(self, playbook: Playbook):
        super().__init__(playbook)
        self.prompts: list[tuple[str, str]] = []

    def complete(self, config, prompt, call_kind):
        self.prompts.append((call_kind, prompt))
        return super().complete(config, prompt, call_kind)

    def sent(self, call_kind: str) -> list[str]:
        return [p for k, p in self.prompts if k == call_kind]


def make_pipeline(name: str, case_dir: Path, playbook: Playbook | None = None,
                  **overrides) -> tuple[Pipeline, RecordingBackend]:
    folder = FIXTURES / name
    task, file_config = load_task(folder / "task.yaml")
    config = resolve_config(None, {**file_config, **overrides})
    backend = RecordingBackend(playbook or Playbook.load(folder / "playbook.yaml"))
    return Pipeline(task, config, backend, case_dir), backend


def run_fixture(name: str, case_dir: Path, playbook: Playbook | None = None, **overrides):
    pipeline, backend = make_pipeline(name, case_dir, playbook, **overrides)
    return pipeline.run(), pipeline, backend


def normalized_signature(case_dir: Path, fixture: str) -> list[dict]:
    """Event stream without timestamps or timings, fixture paths made relative."""
    events, errors = read_events(case_dir)
    assert not errors
    text = json.dumps(event_signature(events), sort_keys=True)
    return json.loads(text.replace(str(FIXTURES / fixture), "<fixture>"))


def kinds(case_dir: Path, kind: str) -> list[dict]:
    return [e.payload for e in read_events(case_dir)[0] if e.kind == kind]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
