"""Versioned prompt template registry.

Templates are plain-text files under ``prompts/<version>/`` using
``str.format`` named placeholders; literal braces are doubled.
"""

from __future__ import annotations

import string
from functools import lru_cache
from pathlib import Path

PROMPT_DIR = Path(__file__).resolve().parent
DEFAULT_VERSION = "v1"

FEEDBACK_PROMPTS = (
    "feedback_init_incremental",
    "feedback_init_hierarchical",
    "feedback_update_incremental",
)


class PromptRegistry:
    def __init__(self, version: str = DEFAULT_VERSION, root: Path = PROMPT_DIR):
        self.version = version
        self.directory = Path(root) / version
        if not self.directory.is_dir():
            raise ValueError(f"no prompt templates for version {version!r} in {root}")
        self._texts: dict[str, str] = {}

    def names(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.txt"))

    def template(self, name: str) -> str:
        if name not in self._texts:
            path = self.directory / f"{name}.txt"
            if not path.exists():
                raise KeyError(f"unknown prompt template {name!r} ({self.version})")
            self._texts[name] = path.read_text(encoding="utf-8").rstrip("\n")
        return self._texts[name]

    def placeholders(self, name: str) -> set[str]:
        return {field for _, field, _, _ in string.Formatter().parse(self.template(name)) if field}

    def render(self, name: str, **values) -> str:
        missing = self.placeholders(name) - values.keys()
        if missing:
            raise KeyError(f"template {name!r} needs {sorted(missing)}")
        return self.template(name).format(**values)


@lru_cache(maxsize=None)
def get_registry(version: str = DEFAULT_VERSION) -> PromptRegistry:
    return PromptRegistry(version)
