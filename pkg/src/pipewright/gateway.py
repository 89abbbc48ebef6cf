"""Model calls and prompt budgeting.

Two backends share one interface: a scripted playbook that replays canned
responses per call kind, and a live chat-completions client. Prompts are
built from prioritized blocks and composed to fit a token budget.
"""
from __future__ import annotations

import hashlib
import math
import os
import re
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import yaml

from .model import CostLedger

DEFAULT_TOKEN_BUDGET = 16_000
WARN_FRACTION = 0.8
HEAD_FRACTION = 0.6
ELISION = "... [earlier traceback lines elided] ...\n"
_SEP = "\n\n"


def estimate_tokens(text: str) -> int:
    """Four characters per token, rounded up."""
    return math.ceil(len(text) / 4)


_lock = threading.Lock()
_calls = 0


def call_count() -> int:
    """Model calls made by every gateway in this process."""
    with _lock:
        return _calls


def _bump() -> None:
    global _calls
    with _lock:
        _calls += 1


class GatewayError(Exception):
    pass


class PlaybookExhausted(GatewayError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    token_budget: int = DEFAULT_TOKEN_BUDGET
    temperature: float = 0.0
    role: str = "coding"
    api_key_env: str = "OPENAI_API_KEY"
    max_retries: int = 2
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if self.role not in ("planning", "coding"):
            raise ValueError(f"role must be planning or coding, not {self.role!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(**dict(d))


@dataclass(frozen=True)
class PromptBlock:
    label: str
    priority: int
    text: str
    token_estimate: int = field(init=False)

    def __post_init__(self) -> None:
        if self.priority < 0:
            raise ValueError("priority must be non-negative")
        object.__setattr__(self, "token_estimate", estimate_tokens(self.text))


@dataclass(frozen=True)
class Composition:
    prompt: str
    included: tuple[str, ...]
    dropped: tuple[str, ...]
    truncated: bool
    tokens: int
    warnings: tuple[tuple[str, str], ...] = ()


def _head_tail(text: str, tokens: int) -> str:
    head = int(tokens * HEAD_FRACTION)
    tail = tokens - head
    return text[: head * 4] + (text[-tail * 4:] if tail else "")


def compose(blocks: Sequence[PromptBlock], budget: int,
            on_event: Callable[[str, dict], None] | None = None) -> Composition:
    """Fit blocks into ``budget`` tokens, most critical (lowest priority) first.

    A block that does not fit is dropped whole, except priority-0 blocks, which
    are cut to their head (60%) and tail (40%) of the space left. Blocks are
    joined by a blank line that is charged one token.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    order = sorted(range(len(blocks)), key=lambda i: (blocks[i].priority, i))
    critical = [i for i in order if blocks[i].priority == 0]
    if len(critical) * 2 - 1 > budget:
        raise ValueError("budget cannot hold one token of every critical block")
    kept: dict[int, str] = {}
    dropped, warnings = [], []
    truncated = False
    remaining = budget
    for n, i in enumerate(order):
        block = blocks[i]
        sep = 1 if kept else 0
        if block.priority == 0:
            later = len(critical) - critical.index(i) - 1
            space = remaining - sep - 2 * later  # one token + separator per later critical block
            if block.token_estimate <= space:
                kept[i], cost = block.text, block.token_estimate
            else:
                kept[i], cost = _head_tail(block.text, space), space
                truncated = True
                warnings.append(("CRITICAL", f"critical block {block.label!r} truncated from "
                                             f"{block.token_estimate} to {space} tokens"))
            remaining -= cost + sep
        elif block.token_estimate + sep <= remaining:
            kept[i] = block.text
            remaining -= block.token_estimate + sep
        else:
            dropped.append(block.label)
    prompt = _SEP.join(kept[i] for i in order if i in kept)
    tokens = estimate_tokens(prompt)
    if tokens >= WARN_FRACTION * budget:
        warnings.append(("WARNING", f"prompt uses {tokens} of {budget} tokens"))
    if on_event:
        for severity, message in warnings:
            on_event("prompt_budget", {"severity": severity, "message": message})
    return Composition(prompt, tuple(blocks[i].label for i in order if i in kept),
                       tuple(dropped), truncated, tokens, tuple(warnings))


def name_tokens(text: str) -> set[str]:
    """Lowercase word tokens; camelCase and letter/digit boundaries split."""
    text = re.sub(r"([a-z])([A-Z])", r"\1 \2", text)
    text = re.sub(r"([A-Za-z])(\d)|(\d)([A-Za-z])", r"\1\3 \2\4", text)
    return {t for t in re.split(r"[^a-z0-9]+", text.lower()) if t}


def project_columns(columns: Sequence[str], goal: str, cap: int = 30) -> list[str]:
    """At most ``cap`` columns, ranked by token overlap with the goal and
    returned in their original order."""
    columns = list(columns)
    if len(columns) <= cap:
        return columns
    goal_tokens = name_tokens(goal)
    ranked = sorted(range(len(columns)),
                    key=lambda i: (-len(name_tokens(columns[i]) & goal_tokens), i))
    return [columns[i] for i in sorted(ranked[:cap])]


def cap_traceback(text: str, max_tokens: int) -> str:
    """Keep the last ``max_tokens`` worth of a traceback, where the exception is."""
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    if estimate_tokens(text) <= max_tokens:
        return text
    return ELISION + text[-max_tokens * 4:]


# backends -----------------------------------------------------------------------

@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int
    cost: float

    def __post_init__(self) -> None:
        if min(self.prompt_tokens, self.completion_tokens, self.cost) < 0:
            raise ValueError("usage values must be non-negative")


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage
    composition: Composition


class Playbook:
    """Canned responses keyed by (call kind, occurrence index)."""

    def __init__(self, responses: Mapping[str, Sequence[str]]):
        self._responses = {k: list(v) for k, v in responses.items()}
        self._next: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: Path | str) -> Playbook:
        data = yaml.safe_load(Path(path).read_text()) or {}
        responses = data.get("responses", data)
        if not isinstance(responses, dict):
            raise ValueError(f"{path}: playbook must map call kinds to response lists")
        return cls({str(k): [str(x) for x in (v if isinstance(v, list) else [v])]
                    for k, v in responses.items()})

    def next(self, call_kind: str) -> str:
        with self._lock:
            i = self._next[call_kind]
            queue = self._responses.get(call_kind, [])
            if i >= len(queue):
                raise PlaybookExhausted(
                    f"playbook has no response #{i + 1} for call kind {call_kind!r}")
            self._next[call_kind] = i + 1
            return queue[i]

    def has(self, call_kind: str) -> bool:
        with self._lock:
            return self._next[call_kind] < len(self._responses.get(call_kind, []))

    def remaining(self) -> dict[str, int]:
        with self._lock:
            return {k: len(v) - self._next[k] for k, v in self._responses.items()}


class ScriptedBackend:
    def __init__(self, playbook: Playbook):
        self.playbook = playbook

    def complete(self, config: ModelConfig, prompt: str, call_kind: str) -> tuple[str, int | None, int | None]:
        return self.playbook.next(call_kind), None, None


class LiveBackend:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(self, transport: httpx.BaseTransport | None = None,
                 backoff_s: float = 0.5, sleep: Callable[[float], None] = time.sleep):
        self._client = httpx.Client(transport=transport)
        self._backoff = backoff_s
        self._sleep = sleep

    def complete(self, config: ModelConfig, prompt: str, call_kind: str) -> tuple[str, int | None, int | None]:
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": config.model, "temperature": config.temperature,
                "messages": [{"role": "user", "content": prompt}]}
        url = config.endpoint.rstrip("/") + "/chat/completions"
        last = None
        for attempt in range(config.max_retries + 1):
            if attempt:
                self._sleep(self._backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=body, headers=headers, timeout=config.timeout_s)
                resp.raise_for_status()
                data = resp.json()
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage") or {}
                return text, usage.get("prompt_tokens"), usage.get("completion_tokens")
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
        raise GatewayError(f"{call_kind}: endpoint failed after {config.max_retries + 1} "
                           f"attempts: {last}")


class Gateway:
    """Thread-safe entry point for every model call in a run."""

    def __init__(self, backend, configs: Mapping[str, ModelConfig] | None = None,
                 prices: Mapping[str, Mapping[str, float]] | None = None,
                 on_event: Callable[[str, dict], None] | None = None):
        self.backend = backend
        self.configs = dict(configs or {})
        self.configs.setdefault("planning", ModelConfig(role="planning"))
        self.configs.setdefault("coding", ModelConfig(role="coding"))
        self.prices = {k: dict(v) for k, v in (prices or {}).items()}
        self.on_event = on_event
        self.ledger = CostLedger()
        self._lock = threading.Lock()

    def snapshot(self) -> CostLedger:
        with self._lock:
            return CostLedger(**self.ledger.to_dict())

    def _cost(self, model: str, prompt_tokens: int, completion_tokens: int) -> float:
        price = self.prices.get(model, {})
        return (prompt_tokens * price.get("prompt", 0.0)
                + completion_tokens * price.get("completion", 0.0)) / 1000.0

    def complete(self, role: str, blocks: Iterable[PromptBlock], call_kind: str) -> Completion:
        config = self.configs[role]
        composition = compose(list(blocks), config.token_budget, self.on_event)
        _bump()
        text, p_tok, c_tok = self.backend.complete(config, composition.prompt, call_kind)
        p_tok = composition.tokens if p_tok is None else p_tok
        c_tok = estimate_tokens(text) if c_tok is None else c_tok
        usage = Usage(p_tok, c_tok, self._cost(config.model, p_tok, c_tok))
        with self._lock:
            self.ledger.calls += 1
            self.ledger.prompt_tokens += p_tok
            self.ledger.completion_tokens += c_tok
            self.ledger.cost += usage.cost
        if self.on_event:
            self.on_event("model_call", {
                "call_kind": call_kind, "role": role, "model": config.model,
                "prompt_sha256": hashlib.sha256(composition.prompt.encode()).hexdigest(),
                "prompt_tokens": p_tok, "completion_tokens": c_tok, "cost": usage.cost,
                "dropped": list(composition.dropped), "truncated": composition.truncated,
                "response": text,
            })
        return Completion(text, usage, composition)
