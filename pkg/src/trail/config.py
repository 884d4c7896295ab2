"""Flat ``key = value`` configuration covering every tunable in the engine.

Example::

    # comments and blank lines are ignored
    refine.tau = 60
    refine.alpha = 0.5
    seed.top_k = 5
    gateway.judge_model = judge-large
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .agent_loop import AgentConfig
from .errors import Misconfiguration
from .llm_gateway import GatewayConfig
from .refine import RefineConfig
from .seed_select import SeedConfig

# short key names that differ from the dataclass field names
ALIASES = {
    "refine.alpha": "refine.combine_alpha",
    "refine.samples": "refine.sample_count",
    "refine.temperature": "refine.generation_temperature",
}


@dataclass(frozen=True)
class TrailConfig:
    seed: SeedConfig = field(default_factory=SeedConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)

    @classmethod
    def keys(cls) -> list[str]:
        out = []
        for section in fields(cls):
            for f in fields(section.default_factory()):  # type: ignore[misc]
                out.append(f"{section.name}.{f.name}")
        return out + list(ALIASES)

    def with_values(self, values: Mapping[str, Any]) -> TrailConfig:
        updates: dict[str, dict[str, Any]] = {}
        for raw_key, raw in values.items():
            key = ALIASES.get(raw_key, raw_key)
            section, _, name = key.partition(".")
            current = getattr(self, section, None) if section in _SECTIONS else None
            if current is None or name not in {f.name for f in fields(current)}:
                raise Misconfiguration(f"unknown config key {raw_key!r}")
            updates.setdefault(section, {})[name] = _coerce(raw_key, getattr(current, name), raw)
        try:
            return replace(self, **{s: replace(getattr(self, s), **kv) for s, kv in updates.items()})
        except ValueError as exc:
            raise Misconfiguration(str(exc)) from exc


_SECTIONS = {"seed", "refine", "agent", "gateway"}


def _coerce(key: str, default: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise Misconfiguration(f"bad value for {key}: {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise Misconfiguration(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | os.PathLike | None = None) -> TrailConfig:
    if path is None:
        return TrailConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise Misconfiguration(f"cannot read config {path}: {exc}") from exc
    return TrailConfig().with_values(parse_config_text(text, str(path)))
