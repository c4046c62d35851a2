"""Prompt templates, stored as editable text assets.

Each asset holds a system prompt and a user template separated by a line
``=== USER ===``.  User templates use ``$name`` placeholders.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

SEPARATOR = "=== USER ==="
NAMES = (
    "core",
    "episodic",
    "semantic",
    "procedural",
    "compress",
    "compress_aggressive",
    "answer",
    "judge",
    "qa_gen",
)


@dataclass(frozen=True)
class Prompt:
    name: str
    system: str
    user: Template

    def render(self, **values) -> tuple[str, str]:
        return Template(self.system).safe_substitute(**values), self.user.substitute(**values)


def _split(name: str, text: str) -> Prompt:
    if SEPARATOR not in text:
        raise ValueError(f"prompt {name!r} lacks the {SEPARATOR!r} separator")
    system, user = text.split(SEPARATOR, 1)
    return Prompt(name, system.strip(), Template(user.strip("\n")))


class PromptSet:
    """All role prompts; files in ``directory`` override the bundled ones."""

    def __init__(self, directory: str | Path | None = None):
        self._prompts = {}
        bundled = resources.files("memweave") / "prompts"
        for name in NAMES:
            path = Path(directory) / f"{name}.txt" if directory else None
            if path is not None and path.exists():
                text = path.read_text(encoding="utf-8")
            else:
                text = (bundled / f"{name}.txt").read_text(encoding="utf-8")
            self._prompts[name] = _split(name, text)

    def __getitem__(self, name: str) -> Prompt:
        return self._prompts[name]


_DEFAULT: PromptSet | None = None


def default_prompts() -> PromptSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptSet()
    return _DEFAULT
