"""JSON run configuration with named presets and dotted-path overrides.

Layout (every section optional)::

    {
      "preset": "machine_a",
      "platform": {"cpu_flops": 4.6e10, ...},
      "tiers": {"device_hbm": {...}, "host_dram": {...}, "expansion": {...}},
      "model": {"n_layers": 2, "n_heads": 2, "head_dim": 8, "seed": 0},
      "engine": {"strategy": "hybrid", "steps": 8, "selection": {...}, "scheduler": {...}},
      "estimate": {"workload": {...}, "n_values": [...], "batch_values": [1], ...},
      "sweep": {"mode": "estimate", "strategy": [...], "n": [...], ...},
      "similarity": {"steps": 8},
      "profile": {"fractions": [...], "threshold": 0.99, "steps": 8}
    }

Infinite capacities may be written as the string ``"inf"``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import costmodel
from .costmodel import PlatformParams, Workload
from .engine import EngineConfig, SchedulerConfig, SelectionConfig
from .errors import ConfigError
from .memory import TierParams, TierSpec
from .model import ModelConfig

SECTIONS = ("preset", "platform", "tiers", "model", "engine", "estimate", "sweep",
            "similarity", "profile")
TIER_KEYS = {"device_hbm": "device", "host_dram": "host_dram", "expansion": "expansion"}


def _number(value, where: str) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return value


def _build(cls, raw: dict | None, where: str, numeric: bool = False, **extra):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    if numeric:
        raw = {k: _number(v, f"{where}.{k}") for k, v in raw.items()}
    raw.update(extra)
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, text = assignment.partition("=")
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {assignment!r} has an empty key")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config section {parts[0]!r} in override {assignment!r}")
    node = raw
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a section")
        node = nxt
    node[parts[-1]] = parse_value(text)


@dataclass
class RunConfig:
    raw: dict
    engine: EngineConfig
    platform: PlatformParams
    estimate: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    profile: dict = field(default_factory=dict)

    def workload(self, n: int | None = None, batch: int | None = None) -> Workload:
        w = _build(Workload, {"n": 1, **self.estimate.get("workload", {})}, "estimate.workload")
        if n is not None:
            w = dataclasses.replace(w, n=int(n))
        if batch is not None:
            w = dataclasses.replace(w, batch=int(batch))
        w.validate()
        return w


def build(raw: dict, preset: str | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    name = preset or raw.get("preset", "machine_a")
    base = dataclasses.asdict(costmodel.preset(name))
    base.update(raw.get("platform") or {})
    platform = _build(PlatformParams, base, "platform", numeric=True)
    platform.validate()

    tiers_raw = dict(raw.get("tiers") or {})
    bad = sorted(set(tiers_raw) - set(TIER_KEYS))
    if bad:
        raise ConfigError(f"unknown tier(s) in tiers: {', '.join(bad)}")
    tiers = TierParams()
    for key, attr in TIER_KEYS.items():
        if key in tiers_raw:
            merged = {**dataclasses.asdict(getattr(tiers, attr)), **tiers_raw[key]}
            setattr(tiers, attr, _build(TierSpec, merged, f"tiers.{key}", numeric=True))
    # host tiers inherit bandwidths from the platform unless set explicitly
    if "read_bandwidth" not in tiers_raw.get("host_dram", {}):
        tiers.host_dram.read_bandwidth = platform.dram_bw
    if "read_bandwidth" not in tiers_raw.get("expansion", {}):
        tiers.expansion.read_bandwidth = platform.expansion_bw

    model = _build(ModelConfig, raw.get("model"), "model")

    eng_raw = dict(raw.get("engine") or {})
    selection = _build(SelectionConfig, eng_raw.pop("selection", None), "engine.selection")
    scheduler = _build(SchedulerConfig, eng_raw.pop("scheduler", None), "engine.scheduler")
    for reserved in ("platform", "tiers", "model"):
        if reserved in eng_raw:
            raise ConfigError(f"engine.{reserved} is not allowed; use the top-level section")
    engine = _build(EngineConfig, eng_raw, "engine", selection=selection, scheduler=scheduler,
                    platform=platform, tiers=tiers, model=model)
    return RunConfig(raw=raw, engine=engine, platform=platform,
                     estimate=dict(raw.get("estimate") or {}),
                     sweep=dict(raw.get("sweep") or {}),
                     similarity=dict(raw.get("similarity") or {}),
                     profile=dict(raw.get("profile") or {}))


def load(path: str | Path | None, overrides=(), preset: str | None = None,
         seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for assignment in overrides:
        apply_override(raw, assignment)
    if seed is not None:
        raw.setdefault("model", {})["seed"] = seed
        raw.setdefault("engine", {})["prompt_seed"] = seed
    return build(raw, preset)
