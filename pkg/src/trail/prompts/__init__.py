"""Versioned prompt templates.

Each ``*.txt`` file starts with ``#`` header lines (version and the reply
grammar the engine parses); the body is a :class:`string.Template`.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def _load(name: str) -> tuple[dict[str, str], Template]:
    text = resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    header: dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#") and not body:
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        else:
            body.append(line)
    return header, Template("\n".join(body).strip("\n") + "\n")


def render(name: str, **values: object) -> str:
    return _load(name)[1].substitute({k: str(v) for k, v in values.items()})


def header(name: str) -> dict[str, str]:
    return dict(_load(name)[0])


TEMPLATES = ("topics", "seeds", "decide", "generate", "aggregate", "judge", "reevaluate", "answer")
