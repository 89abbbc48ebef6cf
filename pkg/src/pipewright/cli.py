"""Command-line interface.

Exit codes: 0 success, 1 pipeline failure, 2 usage or configuration error.
"""
from __future__ import annotations

import glob
import json
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click

from .agents import Pipeline, load_task
from .case import read_events
from .config import ConfigError, read_config_file, resolve_config
from .gateway import LiveBackend, Playbook, ScriptedBackend
from .model import TaskSpec
from .packs import validate_pack
from .report import aggregate, case_table, category_histogram, refinement_curve, render_figures, summarize_case


def _fail_usage(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(2)


def _default_case_dir(goal: str) -> Path:
    slug = re.sub(r"[^a-z0-9]+", "-", goal.lower()).strip("-")[:40] or "run"
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return Path("cases") / f"{stamp}-{slug}"


@click.group()
@click.version_option(package_name="pipewright")
def main() -> None:
    """Build data pipelines from a goal and input files."""


@main.command()
@click.argument("task_file", required=False, type=click.Path(dir_okay=False))
@click.option("--goal", help="Task goal (instead of a task file).")
@click.option("--input", "inputs", multiple=True, help="Input file; repeatable.")
@click.option("--config", "config_file", type=click.Path(dir_okay=False), help="Run configuration (YAML or JSON).")
@click.option("--playbook", type=click.Path(dir_okay=False), help="Scripted responses instead of a live model.")
@click.option("--case-dir", type=click.Path(file_okay=False), help="Where to write the case folder.")
@click.option("--strategy", type=click.Choice(["centralized", "autonomous", "hybrid"], case_sensitive=False))
@click.option("--sampling", type=click.Choice(["linear", "uct"], case_sensitive=False))
@click.option("--refinement-budget", type=int)
@click.option("--critique/--no-critique", default=None, help="Plan and expansion critique loops.")
@click.option("--semantic-check/--no-semantic-check", default=None)
@click.option("--early-stop/--no-early-stop", default=None)
@click.option("--cost-budget", type=float)
@click.option("--seed", type=int)
@click.option("--resume", "resume_dir", type=click.Path(file_okay=False), help="Resume a paused case folder.")
def run(task_file, goal, inputs, config_file, playbook, case_dir, strategy, sampling,
        refinement_budget, critique, semantic_check, early_stop, cost_budget, seed, resume_dir):
    """Run a pipeline and print the answer and the case folder path."""
    file_config: dict = {}
    if resume_dir:
        snap = Path(resume_dir) / "config.json"
        if not snap.exists():
            _fail_usage(f"{resume_dir} is not a case folder (no config.json)")
        if not (Path(resume_dir) / "paused.json").exists():
            _fail_usage(f"{resume_dir} is not paused; only paused runs can be resumed")
        recorded = json.loads(snap.read_text())
        task = TaskSpec(recorded["task"]["goal"], recorded["task"]["inputs"])
        file_config = recorded["config"]
        case_dir = resume_dir
    elif task_file:
        try:
            task, file_config = load_task(task_file)
        except (OSError, ValueError) as exc:
            _fail_usage(str(exc))
    elif goal:
        task = TaskSpec(goal, list(inputs))
    else:
        _fail_usage("give a task file or --goal with --input files")
    for p in task.inputs:
        if not Path(p).exists():
            _fail_usage(f"input file not found: {p}")
    if not task.inputs:
        _fail_usage("the task has no input files")

    flags = {"strategy": strategy, "sampling": sampling, "refinement_budget": refinement_budget,
             "critique": critique, "semantic_validation": semantic_check, "early_stop": early_stop,
             "cost_budget": cost_budget, "seed": seed}
    try:
        if config_file:
            file_config = {**file_config, **read_config_file(config_file)}
        config = resolve_config(None, {**file_config, **{k: v for k, v in flags.items() if v is not None}})
    except ConfigError as exc:
        _fail_usage(f"bad configuration: {exc}")

    if playbook:
        try:
            backend = ScriptedBackend(Playbook.load(playbook))
        except (OSError, ValueError) as exc:
            _fail_usage(f"cannot load playbook: {exc}")
    else:
        backend = LiveBackend()

    pipeline = Pipeline(task, config, backend, case_dir or _default_case_dir(task.goal))
    result = pipeline.resume() if resume_dir else pipeline.run()
    if result.success:
        if result.answer_text is not None:
            click.echo(f"answer: {result.answer_text}")
        else:
            click.echo(result.answer.head(20).to_string(index=False))
    else:
        click.echo(f"{result.status}: {result.reason}", err=True)
    click.echo(f"case: {result.case_path}")
    sys.exit(0 if result.success else 1)


@main.command()
@click.argument("case_path", type=click.Path(exists=True, file_okay=False))
@click.option("--speed", type=float, default=0.0, help="Replay at this multiple of real time; 0 prints at once.")
@click.option("--actor", "actors", multiple=True, help="Only events from this actor; repeatable.")
@click.option("--kind", "kinds", multiple=True, help="Only events of this kind; repeatable.")
def replay(case_path, speed, actors, kinds):
    """Print a case folder's event stream in order."""
    events_file = Path(case_path) / "events.jsonl"
    if not events_file.exists():
        _fail_usage(f"{case_path} has no events.jsonl")
    events, errors = read_events(events_file)
    previous = None
    for e in events:
        if actors and e.actor.value not in actors:
            continue
        if kinds and e.kind not in kinds:
            continue
        if speed > 0 and previous is not None:
            time.sleep(max(0, e.timestamp - previous) / 1000 / speed)
        previous = e.timestamp
        stamp = datetime.fromtimestamp(e.timestamp / 1000, timezone.utc).strftime("%H:%M:%S.%f")[:-3]
        payload = json.dumps(e.payload, sort_keys=True, default=str)
        if len(payload) > 160:
            payload = payload[:157] + "..."
        click.echo(f"{e.seq:5d} {stamp} {e.actor.value:<13} {e.kind:<26} {payload}")
    if errors:
        click.echo(f"{len(errors)} unreadable line(s): " + "; ".join(errors[:5]), err=True)
        sys.exit(1)


@main.command()
@click.argument("patterns", nargs=-1, required=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the per-case CSV here instead of stdout.")
@click.option("--figures", type=click.Path(file_okay=False), help="Directory for the PNG figures.")
def report(patterns, out, figures):
    """Summarize case folders: pass rate, calls, durations, failure categories."""
    paths = sorted({p for pat in patterns for p in glob.glob(pat) if Path(p).is_dir()})
    if not paths:
        _fail_usage("no case folders match")
    summaries = [summarize_case(Path(p)) for p in paths]
    table = case_table(summaries)
    csv_text = table.to_csv(index=False, lineterminator="\n")
    if out:
        Path(out).write_text(csv_text)
    else:
        click.echo(csv_text, nl=False)
    agg = aggregate(summaries)
    click.echo(f"# cases={agg['cases']} pass_rate={agg['pass_rate']:.1%} "
               f"avg_calls={agg['avg_model_calls']:.1f} crash_rate={agg['crash_rate']:.1%}")
    hist = category_histogram(summaries)
    click.echo("# failure categories: " + ", ".join(f"{k}={v}" for k, v in hist.items() if v))
    curve = refinement_curve(summaries)
    click.echo("# refinement curve: " + ", ".join(f"+{k}={v:.0%}" for k, v in curve.items()))
    fig_dir = Path(figures) if figures else (Path(out).parent if out else Path("."))
    for path in render_figures(summaries, fig_dir):
        click.echo(f"# figure: {path}")


@main.command("validate-pack")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def validate_pack_command(path):
    """Check a knowledge pack file against the pack schema."""
    errors = validate_pack(path)
    if errors:
        for e in errors:
            click.echo(f"{path}: {e}", err=True)
        sys.exit(1)
    click.echo(f"{path}: ok")


if __name__ == "__main__":
    main()
