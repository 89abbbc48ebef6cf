"""Process-isolated execution of generated stage programs.

A stage program is Python source defining ``stage_<name>(table, ...)`` that
takes one DataFrame per declared input and returns one DataFrame. Each run
happens in a fresh child process that can be killed on timeout, so a stage
that hangs or misbehaves leaves nothing behind in the host. This is
namespace isolation with capability guards, not an OS-level security
boundary.
"""
from __future__ import annotations

import ast
import builtins
import contextlib
import copy
import io
import multiprocessing as mp
import time
import traceback
import warnings as pywarnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, NamedTuple

import pandas as pd

# Slack allowed on top of the wall-clock limit for process start and teardown.
SCHEDULING_SLACK_S = 2.0
MAX_STDOUT_CHARS = 20_000

ALLOWED_MODULES = frozenset({
    "pandas", "numpy", "datetime", "math", "re", "statistics", "collections",
    "itertools", "functools", "string", "json", "decimal", "fractions", "typing",
    "operator", "calendar", "random", "heapq", "bisect", "copy", "textwrap",
    "unicodedata", "dataclasses", "enum", "zoneinfo", "time", "warnings",
})
DENIED_MODULES = frozenset({
    "os", "sys", "subprocess", "socket", "shutil", "pathlib", "io", "builtins",
    "importlib", "ctypes", "multiprocessing", "threading", "signal", "pty", "urllib",
    "http", "requests", "httpx", "pickle", "marshal", "glob", "tempfile", "asyncio",
})
_HIDDEN_BUILTINS = ("open", "exec", "eval", "compile", "input", "breakpoint", "exit",
                    "quit", "help", "__import__", "globals", "memoryview")


class FailureKind(str, Enum):
    EXCEPTION = "exception"
    TIMEOUT = "timeout"
    NONCOMPLIANT = "contract-noncompliance"
    SANDBOX_VIOLATION = "sandbox-violation"
    BAD_RETURN = "bad-return-type"
    SYNTAX = "syntax-error"
    MEMORY = "memory"


class SandboxViolation(Exception):
    """Stage code reached for a capability the sandbox does not grant."""


@dataclass(frozen=True)
class ExecutionLimits:
    wall_clock_s: float = 300.0
    memory_bytes: int | None = None

    def __post_init__(self) -> None:
        if self.wall_clock_s <= 0:
            raise ValueError("wall_clock_s must be positive")
        if self.memory_bytes is not None and self.memory_bytes <= 0:
            raise ValueError("memory_bytes must be positive")


@dataclass(frozen=True)
class ExecutionError:
    kind: FailureKind
    message: str
    traceback: str = ""


@dataclass
class ExecutionResult:
    success: bool
    output: pd.DataFrame | None = None
    stdout: str = ""
    elapsed_s: float = 0.0
    peak_memory_bytes: int = 0
    error: ExecutionError | None = None
    stage_name: str | None = None
    memory_approximate: bool = False
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.success and (self.output is None or self.error is not None):
            raise ValueError("a successful result carries an output and no error")
        if not self.success and self.error is None:
            raise ValueError("a failed result carries an error")

    @property
    def error_text(self) -> str:
        if self.error is None:
            return ""
        return self.error.traceback or f"{self.error.kind.value}: {self.error.message}"


class Discovery(NamedTuple):
    names: list[str]
    note: str | None


def discover_stage_functions(code: str) -> Discovery:
    """Top-level functions named ``stage_*``, in source order."""
    try:
        tree = ast.parse(code)
    except SyntaxError as exc:
        return Discovery([], f"parse failure: {exc.msg} (line {exc.lineno})")
    names = [n.name for n in tree.body
             if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef)) and n.name.startswith("stage_")]
    return Discovery(names, None)


def _guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
    root = name.split(".")[0]
    if level or root in DENIED_MODULES:
        raise SandboxViolation(f"import of {name!r} is not allowed in a stage")
    if root not in ALLOWED_MODULES:
        raise ImportError(f"No module named {name!r}: package not available in the sandbox")
    return builtins.__import__(name, globals, locals, fromlist, level)


def _deny(what: str):
    def blocked(*args, **kwargs):
        raise SandboxViolation(f"{what} is not allowed in a stage")
    return blocked


def _install_guards() -> None:
    """Close filesystem, process and network entry points in this (child) process."""
    import os
    import socket
    import subprocess

    builtins.open = _deny("filesystem access (open)")
    io.open = builtins.open
    for name in ("system", "popen", "remove", "unlink", "rmdir", "mkdir", "makedirs",
                 "rename", "replace", "chdir", "kill", "fork", "execv", "execve",
                 "spawnv", "listdir", "scandir", "walk", "startfile"):
        if hasattr(os, name):
            setattr(os, name, _deny(f"os.{name}"))
    os.environ.clear()
    subprocess.Popen = _deny("subprocess")  # type: ignore[misc]
    socket.socket = _deny("network access")  # type: ignore[misc]
    socket.create_connection = _deny("network access")


def _restricted_namespace() -> dict:
    import datetime
    import math
    import re

    import numpy as np

    safe = {k: v for k, v in vars(builtins).items() if k not in _HIDDEN_BUILTINS}
    safe["__import__"] = _guarded_import
    return {"__builtins__": safe, "__name__": "stage", "pd": pd, "np": np,
            "datetime": datetime, "math": math, "re": re}


def _limit_memory(memory_bytes: int) -> None:
    import resource

    try:
        with builtins.open("/proc/self/statm") as fh:
            current = int(fh.read().split()[0]) * resource.getpagesize()
    except OSError:
        current = 0
    _, hard = resource.getrlimit(resource.RLIMIT_AS)
    soft = current + memory_bytes
    if hard != resource.RLIM_INFINITY:
        soft = min(soft, hard)
    resource.setrlimit(resource.RLIMIT_AS, (soft, hard))


def _stage_traceback(exc: BaseException) -> str:
    tb = exc.__traceback__
    while tb is not None and tb.tb_frame.f_code.co_filename == __file__:
        tb = tb.tb_next
    return "".join(traceback.format_exception(type(exc), exc, tb))


def _warning_lines(caught) -> list[str]:
    lines = [f"{w.category.__name__}: {w.message}" for w in caught or ()]
    return list(dict.fromkeys(lines))[:10]


def _child(conn, code: str, stage_name: str, inputs: dict, memory_bytes: int | None) -> None:
    import linecache
    import tracemalloc

    if memory_bytes:
        _limit_memory(memory_bytes)
    filename = f"<{stage_name}>"
    linecache.cache[filename] = (len(code), None, code.splitlines(True), filename)
    namespace = _restricted_namespace()
    out = io.StringIO()
    peak = 0
    started = time.perf_counter()
    caught: list = []
    try:
        _install_guards()
        compiled = compile(code, filename, "exec")
        args = [copy.deepcopy(df) for df in inputs.values()]
        tracemalloc.start()
        with contextlib.redirect_stdout(out), pywarnings.catch_warnings(record=True) as caught:
            pywarnings.simplefilter("always")
            exec(compiled, namespace)
            result = namespace[stage_name](*args)
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        elapsed = time.perf_counter() - started
        if not isinstance(result, pd.DataFrame):
            conn.send(("err", FailureKind.BAD_RETURN.value,
                       f"{stage_name} returned {type(result).__name__}, expected a DataFrame",
                       "", out.getvalue(), peak, elapsed, _warning_lines(caught)))
        else:
            conn.send(("ok", result, out.getvalue(), peak, elapsed, _warning_lines(caught)))
    except BaseException as exc:  # noqa: BLE001 - everything is reported to the parent
        if tracemalloc.is_tracing():
            peak = tracemalloc.get_traced_memory()[1]
            tracemalloc.stop()
        if isinstance(exc, SandboxViolation):
            kind = FailureKind.SANDBOX_VIOLATION
        elif isinstance(exc, MemoryError):
            kind = FailureKind.MEMORY
        else:
            kind = FailureKind.EXCEPTION
        conn.send(("err", kind.value, f"{type(exc).__name__}: {exc}", _stage_traceback(exc),
                   out.getvalue(), peak, time.perf_counter() - started, _warning_lines(caught)))
    finally:
        conn.close()


def _context():
    # fork keeps start-up cheap and needs no __main__ guard in callers; the child
    # only runs the stage and reports back, so it never touches parent locks.
    if "fork" in mp.get_all_start_methods():
        return mp.get_context("fork")
    return mp.get_context("spawn")


def _failure(kind: FailureKind, message: str, tb: str = "", **kw) -> ExecutionResult:
    return ExecutionResult(success=False, error=ExecutionError(kind, message, tb), **kw)


def execute_stage(code: str, inputs: Mapping[str, pd.DataFrame],
                  limits: ExecutionLimits | None = None) -> ExecutionResult:
    """Run the first ``stage_*`` function in ``code`` on copies of ``inputs``.

    Tables are passed positionally in mapping order. The caller's tables are
    never touched: the child process receives pickled copies.
    """
    limits = limits or ExecutionLimits()
    found = discover_stage_functions(code)
    if found.note:
        return _failure(FailureKind.SYNTAX, found.note, found.note)
    if not found.names:
        return _failure(FailureKind.NONCOMPLIANT,
                        "no stage_* function defined; the program must define "
                        "stage_<name>(...) returning a DataFrame")
    stage_name = found.names[0]
    warnings = []
    if len(found.names) > 1:
        warnings.append(f"multiple stage functions {found.names}; invoked {stage_name}")

    ctx = _context()
    parent_conn, child_conn = ctx.Pipe(duplex=False)
    proc = ctx.Process(target=_child, daemon=True,
                       args=(child_conn, code, stage_name, dict(inputs), limits.memory_bytes))
    started = time.perf_counter()
    proc.start()
    child_conn.close()
    message = None
    try:
        if parent_conn.poll(limits.wall_clock_s):
            message = parent_conn.recv()
    except EOFError:
        message = None
    finally:
        parent_conn.close()
    elapsed = time.perf_counter() - started
    if message is None:
        if proc.is_alive():
            proc.kill()
            proc.join()
            return _failure(FailureKind.TIMEOUT,
                            f"stage exceeded the wall-clock limit of {limits.wall_clock_s}s",
                            f"TimeoutError: stage {stage_name} exceeded {limits.wall_clock_s}s",
                            elapsed_s=elapsed, stage_name=stage_name, warnings=warnings)
        proc.join()
        kind = FailureKind.MEMORY if limits.memory_bytes else FailureKind.EXCEPTION
        return _failure(kind, f"stage process died with exit code {proc.exitcode}",
                        f"MemoryError: stage process died (exit code {proc.exitcode})"
                        if limits.memory_bytes else f"stage process died ({proc.exitcode})",
                        elapsed_s=elapsed, stage_name=stage_name, warnings=warnings)
    proc.join()
    if message[0] == "ok":
        _, output, stdout, peak, child_elapsed, raised = message
        return ExecutionResult(True, output=output, stdout=stdout[-MAX_STDOUT_CHARS:],
                               elapsed_s=child_elapsed, peak_memory_bytes=peak,
                               stage_name=stage_name, warnings=warnings + raised)
    _, kind, msg, tb, stdout, peak, child_elapsed, raised = message
    warnings += raised
    return _failure(FailureKind(kind), msg, tb, stdout=stdout[-MAX_STDOUT_CHARS:],
                    elapsed_s=child_elapsed, peak_memory_bytes=peak,
                    stage_name=stage_name, warnings=warnings)
