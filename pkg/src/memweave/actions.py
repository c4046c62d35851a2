"""Parsing and validation of raw memory-agent output.

Agents answer in JSON.  Core agents emit one object::

    {"operation": "REPLACE", "old_text": "...", "new_text": "..."}

Entry agents emit an operation list::

    {"operations": [{"action": "UPDATE", "old_memory": "...", "memory": "..."}]}

Old entries are referenced by their text, so :func:`resolve_references`
maps each quoted text back to an entry id before the ops can be applied.
An output is valid when the JSON is well formed, every action belongs to the
agent's action space, all required fields are present, and every referenced
entry exists.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ActionError,
    IllegalActionForType,
    InvalidField,
    MalformedJson,
    MissingField,
    ResolutionFailure,
    UnknownAction,
)
from .memory import (
    ACTION_SPACES,
    CORE,
    ENTRY_TYPES,
    EPISODIC,
    PROCEDURAL,
    SEMANTIC,
    CoreOp,
    EntryOp,
    MemoryBank,
    MemoryEntry,
)
from .store import EmbedFn, VectorStore

logger = logging.getLogger(__name__)

DEFAULT_RESOLVE_THRESHOLD = 0.95
_MAX_DECODE_STARTS = 64
_FENCE = re.compile(r"```[a-zA-Z]*\s*(.*?)```", re.DOTALL)

CORE_ACTIONS = {"APPEND": "Append", "REPLACE": "Replace", "REWRITE": "Rewrite"}
ENTRY_ACTIONS = {"ADD": "Add", "UPDATE": "Update", "MERGE": "Merge", "SKIP": "Skip"}


def extract_json_object(raw: str) -> dict:
    """Return the first JSON object embedded in ``raw``.

    Markdown fences and surrounding prose are tolerated; the object itself
    must decode cleanly.
    """
    if not isinstance(raw, str):
        raise MalformedJson(f"expected text, got {type(raw).__name__}")
    candidates = [m.group(1) for m in _FENCE.finditer(raw)] + [raw]
    decoder = json.JSONDecoder()
    for text in candidates:
        start = text.find("{")
        tries = 0
        while start != -1 and tries < _MAX_DECODE_STARTS:
            tries += 1
            try:
                obj, _ = decoder.raw_decode(text, start)
            except (ValueError, RecursionError):
                obj = None
            if isinstance(obj, dict):
                return obj
            start = text.find("{", start + 1)
    raise MalformedJson("no decodable JSON object found")


def _text_field(obj: Mapping, key: str, *, allow_empty: bool = False, context: str = "") -> str:
    if key not in obj or obj[key] is None:
        raise MissingField(key, context)
    value = obj[key]
    if not isinstance(value, str):
        raise InvalidField(f"{key} must be a string ({context})" if context else f"{key} must be a string")
    if not value and not allow_empty:
        raise MissingField(key, context or "empty")
    return value


# ---------------------------------------------------------------------------
# core


def parse_core(raw: str) -> CoreOp:
    obj = extract_json_object(raw)
    action = obj.get("operation")
    if action is None:
        raise MissingField("operation")
    if not isinstance(action, str):
        raise InvalidField("operation must be a string")
    if action not in CORE_ACTIONS:
        raise UnknownAction(f"{action!r} is not a core operation")
    kind = CORE_ACTIONS[action]
    if kind == "Replace":
        return CoreOp(
            kind,
            old_text=_text_field(obj, "old_text", context=action),
            new_text=_text_field(obj, "new_text", allow_empty=True, context=action),
        )
    return CoreOp(kind, content=_text_field(obj, "content", context=action))


def core_op_to_json(op: CoreOp) -> str:
    action = op.kind.upper()
    if op.kind == "Replace":
        body = {"operation": action, "old_text": op.old_text, "new_text": op.new_text}
    else:
        body = {"operation": action, "content": op.content}
    return json.dumps(body, ensure_ascii=False)


# ---------------------------------------------------------------------------
# entries


@dataclass(frozen=True)
class RawEntryOp:
    """An entry operation as written by the agent, before id resolution."""

    kind: str  # Add | Update | Merge | Skip
    memory: str = ""
    old_memory: str = ""
    old_memories: tuple[str, ...] = ()
    reason: str = ""

    def to_dict(self) -> dict:
        d: dict = {"action": self.kind.upper()}
        if self.kind == "Skip":
            d["reason"] = self.reason
            return d
        if self.kind == "Update":
            d["old_memory"] = self.old_memory
        if self.kind == "Merge":
            d["old_memories"] = list(self.old_memories)
        d["memory"] = self.memory
        return d


def entry_ops_to_json(ops: Sequence[RawEntryOp]) -> str:
    return json.dumps({"operations": [op.to_dict() for op in ops]}, ensure_ascii=False)


def _parse_item(item, mem_type: str, idx: int) -> RawEntryOp:
    ctx = f"operations[{idx}]"
    if not isinstance(item, dict):
        raise InvalidField(f"{ctx} must be an object")
    action = item.get("action")
    if action is None:
        raise MissingField("action", ctx)
    if not isinstance(action, str):
        raise InvalidField(f"{ctx}.action must be a string")
    if action not in ENTRY_ACTIONS:
        raise UnknownAction(f"{action!r} is not an entry action ({ctx})")
    kind = ENTRY_ACTIONS[action]
    if kind not in ACTION_SPACES[mem_type]:
        raise IllegalActionForType(f"{action} is not allowed for {mem_type} memory ({ctx})")

    if kind == "Skip":
        return RawEntryOp(kind, reason=_text_field(item, "reason", allow_empty=True, context=ctx))
    # the update form is also seen in the wild with "new_memory" for the new text
    if kind == "Update" and "memory" not in item and "new_memory" in item:
        memory = _text_field(item, "new_memory", context=ctx)
    else:
        memory = _text_field(item, "memory", context=ctx)
    if kind == "Add":
        return RawEntryOp(kind, memory=memory)
    if kind == "Update":
        return RawEntryOp(kind, memory=memory, old_memory=_text_field(item, "old_memory", context=ctx))
    olds = item.get("old_memories")
    if olds is None:
        raise MissingField("old_memories", ctx)
    if not isinstance(olds, list) or not all(isinstance(o, str) and o for o in olds):
        raise InvalidField(f"{ctx}.old_memories must be a list of non-empty strings")
    if len(olds) < 2:
        raise InvalidField(f"{ctx}.old_memories needs at least two entries")
    return RawEntryOp(kind, memory=memory, old_memories=tuple(olds))


def parse_entry_ops(raw: str, mem_type: str) -> list[RawEntryOp]:
    if mem_type not in ENTRY_TYPES:
        raise ValueError(f"unknown memory type {mem_type!r}")
    obj = extract_json_object(raw)
    if "operations" not in obj:
        raise MissingField("operations")
    items = obj["operations"]
    if not isinstance(items, list):
        raise InvalidField("operations must be a list")
    return [_parse_item(item, mem_type, i) for i, item in enumerate(items)]


# ---------------------------------------------------------------------------
# reference resolution


def _section_vectors(section: Sequence[MemoryEntry], embed_fn: EmbedFn, store: VectorStore | None) -> np.ndarray:
    rows = []
    missing = []
    for n, entry in enumerate(section):
        vec = None
        if store is not None:
            try:
                vec = store.vector(entry.id)
            except KeyError:
                pass
        rows.append(vec)
        if vec is None:
            missing.append(n)
    if missing:
        fresh = np.asarray(embed_fn([section[n].content for n in missing]), dtype=np.float64)
        for n, vec in zip(missing, fresh):
            rows[n] = vec / (np.linalg.norm(vec) or 1.0)
    return np.vstack(rows)


class _Resolver:
    def __init__(self, section, embed_fn, threshold, store):
        self.section = list(section)
        self.embed_fn = embed_fn
        self.threshold = threshold
        self.store = store
        self._vectors = None
        self._exact: dict[str, int] = {}
        for e in self.section:
            self._exact[e.content] = e.id  # later (newer) entries win

    def __call__(self, text: str) -> int:
        if text in self._exact:
            return self._exact[text]
        if not self.section:
            raise ResolutionFailure(f"no entry matches {text[:60]!r} (section is empty)")
        if self._vectors is None:
            self._vectors = _section_vectors(self.section, self.embed_fn, self.store)
        q = np.asarray(self.embed_fn([text]), dtype=np.float64)[0]
        q = q / (np.linalg.norm(q) or 1.0)
        scores = self._vectors @ q
        best = int(np.argmax(scores))  # first maximum = lowest id among ties
        if scores[best] >= self.threshold:
            return self.section[best].id
        raise ResolutionFailure(
            f"no entry matches {text[:60]!r} (best similarity {scores[best]:.3f} < {self.threshold})"
        )


def resolve_references(
    ops: Sequence[RawEntryOp],
    section: Sequence[MemoryEntry],
    embed_fn: EmbedFn,
    threshold: float = DEFAULT_RESOLVE_THRESHOLD,
    store: VectorStore | None = None,
) -> list[EntryOp]:
    """Map quoted old-memory texts to entry ids: exact text first, then cosine >= threshold."""
    resolve = _Resolver(sorted(section, key=lambda e: e.id), embed_fn, threshold, store)
    out = []
    for op in ops:
        if op.kind in ("Add", "Skip"):
            out.append(EntryOp(op.kind, op.memory, (), op.reason))
        elif op.kind == "Update":
            out.append(EntryOp("Update", op.memory, (resolve(op.old_memory),)))
        else:
            targets = tuple(dict.fromkeys(resolve(t) for t in op.old_memories))
            if len(targets) < 2:
                raise ResolutionFailure("merge references resolve to fewer than two distinct entries")
            out.append(EntryOp("Merge", op.memory, targets))
    return out


# ---------------------------------------------------------------------------
# rollout validity


@dataclass
class TypeValidity:
    valid: bool
    diagnostics: list[str] = field(default_factory=list)
    core_op: CoreOp | None = None
    entry_ops: list[EntryOp] = field(default_factory=list)


@dataclass
class ValidityReport:
    per_type: dict[str, TypeValidity]

    @property
    def valid(self) -> bool:
        return all(t.valid for t in self.per_type.values())

    def type_flags(self) -> dict[str, bool]:
        return {k: v.valid for k, v in self.per_type.items()}

    def diagnostics(self) -> dict[str, list[str]]:
        return {k: list(v.diagnostics) for k, v in self.per_type.items()}


def validate_core(raw: str, bank: MemoryBank) -> TypeValidity:
    try:
        op = parse_core(raw)
    except ActionError as exc:
        return TypeValidity(False, [exc.diagnostic()])
    if op.kind == "Replace" and op.old_text not in bank.core.text:
        return TypeValidity(False, [ResolutionFailure("replace target not present in core").diagnostic()])
    return TypeValidity(True, core_op=op)


def validate_entries(
    raw: str,
    mem_type: str,
    bank: MemoryBank,
    embed_fn: EmbedFn,
    threshold: float = DEFAULT_RESOLVE_THRESHOLD,
    store: VectorStore | None = None,
) -> TypeValidity:
    try:
        ops = resolve_references(parse_entry_ops(raw, mem_type), bank.section(mem_type), embed_fn, threshold, store)
    except ActionError as exc:
        return TypeValidity(False, [exc.diagnostic()])
    return TypeValidity(True, entry_ops=ops)


def validate_rollout(
    core_raw: str,
    epi_raw: str,
    sem_raw: str,
    proc_raw: str,
    bank: MemoryBank,
    embed_fn: EmbedFn,
    threshold: float = DEFAULT_RESOLVE_THRESHOLD,
    store: VectorStore | None = None,
) -> ValidityReport:
    """Parse and resolve all four agent outputs against ``bank``.

    Never raises for bad agent output; failures land in the report.
    """
    per_type = {CORE: validate_core(core_raw, bank)}
    for mem_type, raw in ((EPISODIC, epi_raw), (SEMANTIC, sem_raw), (PROCEDURAL, proc_raw)):
        per_type[mem_type] = validate_entries(raw, mem_type, bank, embed_fn, threshold, store)
    for mem_type, report in per_type.items():
        if not report.valid:
            logger.debug("%s output invalid: %s", mem_type, "; ".join(report.diagnostics))
    return ValidityReport(per_type)
