"""Run configuration: defaults, overlaid by a YAML/JSON file, overlaid by flags."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gateway import ModelConfig
from .monitor import MonitorThresholds
from .recovery import CritiqueLoopConfig
from .sampling import Strategy


class ConfigError(ValueError):
    pass


class StrategyKind(str, Enum):
    CENTRALIZED = "CENTRALIZED"
    AUTONOMOUS = "AUTONOMOUS"
    HYBRID = "HYBRID"


@dataclass(frozen=True)
class CritiqueSettings:
    plan: bool = True
    expansion: bool = True
    max_iterations: int = 10
    convergence_detection: bool = False
    dual_judge: bool = False

    def loop_config(self) -> CritiqueLoopConfig:
        return CritiqueLoopConfig(self.max_iterations, convergence_detection=self.convergence_detection,
                                  dual_judge=self.dual_judge)


@dataclass(frozen=True)
class RunConfig:
    strategy: StrategyKind = StrategyKind.CENTRALIZED
    sampling: Strategy = Strategy.LINEAR
    refinement_budget: int = 3
    uct_c: float = math.sqrt(2)
    tau: float = 0.92
    early_stop: bool = False
    critique: CritiqueSettings = field(default_factory=CritiqueSettings)
    per_phase_cap: int = 2
    plan_revision_cap: int = 2
    thresholds: MonitorThresholds = field(default_factory=MonitorThresholds)
    models: dict[str, ModelConfig] = field(default_factory=lambda: {
        "planning": ModelConfig(role="planning"), "coding": ModelConfig(role="coding")})
    prices: dict[str, dict[str, float]] = field(default_factory=dict)
    cost_budget: float | None = None
    semantic_validation: bool = False
    seed: int = 0
    wall_clock_s: float = 300.0
    memory_mb: int | None = None
    traceback_tokens: int = 800
    max_workers: int = 4
    pack_dirs: tuple[str, ...] = ()
    prior_cases: tuple[str, ...] = ()
    pattern_k: int = 3

    def __post_init__(self) -> None:
        if self.refinement_budget < 0:
            raise ConfigError("refinement_budget must be non-negative")
        if self.per_phase_cap < 1 or self.plan_revision_cap < 0:
            raise ConfigError("per_phase_cap must be >= 1 and plan_revision_cap >= 0")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be positive")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["sampling"] = self.sampling.value
        d["pack_dirs"] = list(self.pack_dirs)
        d["prior_cases"] = list(self.prior_cases)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        try:
            if "strategy" in d:
                d["strategy"] = StrategyKind(str(d["strategy"]).upper())
            if "sampling" in d:
                d["sampling"] = Strategy(str(d["sampling"]).upper())
            if "critique" in d:
                c = d["critique"]
                d["critique"] = (CritiqueSettings(plan=c, expansion=c) if isinstance(c, bool)
                                 else CritiqueSettings(**c))
            if "thresholds" in d:
                d["thresholds"] = MonitorThresholds.from_dict(d["thresholds"])
            if "models" in d:
                models = {"planning": ModelConfig(role="planning"),
                          "coding": ModelConfig(role="coding")}
                for role, m in (d["models"] or {}).items():
                    models[role] = ModelConfig.from_dict({"role": role, **m})
                d["models"] = models
            for key in ("pack_dirs", "prior_cases"):
                if key in d:
                    d[key] = tuple(str(x) for x in d[key] or ())
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


def _deep_merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config_file(path: Path | str) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(path: Path | str | None = None,
                   overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Flags override the file, which overrides the defaults. ``None`` flags are ignored."""
    data: dict = read_config_file(path) if path else {}
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    return RunConfig.from_dict(_deep_merge(data, flags))
