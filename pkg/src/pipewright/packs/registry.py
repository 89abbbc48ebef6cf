"""Pack loading, domain detection and on-demand guidance selection.

A pack is one YAML file; every ``*.yaml`` in a pack directory is picked up,
so adding a domain means adding a file.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import yaml

DATA_DIR = Path(__file__).parent / "data"
SCHEMA_PATH = Path(__file__).parent / "pack.schema.json"


class PackError(Exception):
    pass


def tokens(text: str) -> set[str]:
    return {t for t in re.split(r"[^a-z0-9]+", text.lower()) if t}


@dataclass(frozen=True)
class PackItem:
    triggers: tuple[str, ...]
    text: str
    categories: tuple[str, ...] = ()

    def triggered_by(self, token_set: set[str]) -> bool:
        # A multi-word trigger such as "fixed-width" needs all of its words.
        return any(tokens(t) and tokens(t) <= token_set for t in self.triggers)


@dataclass(frozen=True)
class KnowledgePack:
    name: str
    keywords: tuple[str, ...]
    expert_prompt: str
    planning_guidance: tuple[str, ...] = ()
    recipes: tuple[PackItem, ...] = ()
    gotchas: tuple[PackItem, ...] = ()
    tools: tuple[str, ...] = ()
    description: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> KnowledgePack:
        def items(key):
            return tuple(PackItem(tuple(i["triggers"]), i["text"], tuple(i.get("categories", ())))
                         for i in d.get(key) or [])
        return cls(name=d["name"], keywords=tuple(k.lower() for k in d["keywords"]),
                   expert_prompt=d["expert_prompt"].strip(),
                   planning_guidance=tuple(d.get("planning_guidance") or ()),
                   recipes=items("recipes"), gotchas=items("gotchas"),
                   tools=tuple(d.get("tools") or ()), description=d.get("description", ""))


@lru_cache(maxsize=1)
def _schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text())


def validate_pack(path: Path | str) -> list[str]:
    """Schema errors for a pack file; empty when it conforms."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        return [f"cannot read pack: {exc}"]
    validator = jsonschema.Draft202012Validator(_schema())
    errors = []
    for err in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    return errors


def load_pack(path: Path | str) -> KnowledgePack:
    errors = validate_pack(path)
    if errors:
        raise PackError(f"{path}: " + "; ".join(errors))
    return KnowledgePack.from_dict(yaml.safe_load(Path(path).read_text()))


class Registry:
    """Immutable set of packs with unique names."""

    def __init__(self, packs: Iterable[KnowledgePack]):
        packs = tuple(packs)
        names = [p.name for p in packs]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise PackError(f"duplicate pack names: {dupes}")
        self._packs = tuple(sorted(packs, key=lambda p: p.name))

    @classmethod
    def load(cls, *dirs: Path | str) -> Registry:
        dirs = dirs or (DATA_DIR,)
        return cls(load_pack(f) for d in dirs for f in sorted(Path(d).glob("*.yaml")))

    @property
    def packs(self) -> tuple[KnowledgePack, ...]:
        return self._packs

    def get(self, name: str) -> KnowledgePack:
        for p in self._packs:
            if p.name == name:
                return p
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self._packs)

    def __iter__(self):
        return iter(self._packs)


def detect_domains(goal: str, columns: Sequence[str], registry: Iterable[KnowledgePack]
                   ) -> list[KnowledgePack]:
    """Packs whose keywords meet the goal and column-name tokens, most matches first."""
    found = tokens(goal)
    for c in columns:
        found |= tokens(c)
    scored = [(len(set(p.keywords) & found), p) for p in registry]
    return [p for n, p in sorted(scored, key=lambda x: (-x[0], x[1].name)) if n > 0]


@dataclass(frozen=True)
class GuidanceItem:
    pack: str
    kind: str  # "recipe" or "gotcha"
    text: str


@dataclass(frozen=True)
class GuidanceBundle:
    expert_prompts: tuple[tuple[str, str], ...] = ()
    items: tuple[GuidanceItem, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.expert_prompts and not self.items

    def render(self) -> str:
        lines = []
        for pack, prompt in self.expert_prompts:
            lines.append(f"Domain expertise ({pack}): {prompt}")
        for item in self.items:
            lines.append(f"- [{item.pack} {item.kind}] {item.text}")
        return "\n".join(lines)


def select_guidance(packs: Sequence[KnowledgePack], objective: str) -> GuidanceBundle:
    """Expert prompts for every pack plus the recipes and gotchas the objective triggers."""
    objective_tokens = tokens(objective)
    prompts, items, seen = [], [], set()
    for p in packs:
        if p.expert_prompt not in {t for _, t in prompts}:
            prompts.append((p.name, p.expert_prompt))
        for kind, group in (("recipe", p.recipes), ("gotcha", p.gotchas)):
            for item in group:
                if item.triggered_by(objective_tokens) and item.text not in seen:
                    seen.add(item.text)
                    items.append(GuidanceItem(p.name, kind, item.text))
    return GuidanceBundle(tuple(prompts), tuple(items))
