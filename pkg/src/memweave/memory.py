"""Four-part memory bank and the pure application of validated operations.

A bank holds one always-in-context Core text block plus three entry
sections (episodic, semantic, procedural).  Entries are never deleted:
Update and Merge append new entries that point back at the ones they
supersede, so the full history stays retrievable.

Banks are immutable values.  Every operation returns a new bank.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import DanglingReference, IllegalAction, ReplaceTargetNotFound

EPISODIC = "episodic"
SEMANTIC = "semantic"
PROCEDURAL = "procedural"
CORE = "core"
ENTRY_TYPES = (EPISODIC, SEMANTIC, PROCEDURAL)

ACTION_SPACES: dict[str, frozenset[str]] = {
    CORE: frozenset({"Append", "Replace", "Rewrite"}),
    EPISODIC: frozenset({"Add", "Update", "Merge"}),
    SEMANTIC: frozenset({"Add", "Update", "Skip"}),
    PROCEDURAL: frozenset({"Add", "Update"}),
}

DEFAULT_CORE_CAPACITY = 5000

_DATE_PREFIX = re.compile(r"^\s*(\d{4}-\d{2}-\d{2})(?:\.\.(\d{4}-\d{2}-\d{2}))?\s*:")

Tokenizer = Callable[[str], int]


def token_count(text: str) -> int:
    """Number of maximal whitespace-delimited runs in ``text``."""
    return len(text.split())


# ---------------------------------------------------------------------------
# timestamps


def _as_date(value: dt.date | str) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value)[:10])


def format_span(start: dt.date, end: dt.date | None = None) -> str:
    if end is None or end == start:
        return start.isoformat()
    return f"{start.isoformat()}..{end.isoformat()}"


def parse_span(timestamp: str) -> tuple[dt.date, dt.date]:
    """Parse ``YYYY-MM-DD`` or ``YYYY-MM-DD..YYYY-MM-DD`` into (start, end)."""
    start, _, end = timestamp.partition("..")
    first = dt.date.fromisoformat(start)
    return first, dt.date.fromisoformat(end) if end else first


def date_prefix(content: str) -> str | None:
    """The leading date or date-range label of an episodic text, if well formed."""
    m = _DATE_PREFIX.match(content)
    if not m:
        return None
    try:
        start = dt.date.fromisoformat(m.group(1))
        end = dt.date.fromisoformat(m.group(2)) if m.group(2) else start
    except ValueError:
        return None
    if end < start:
        return None
    return format_span(start, end)


def _strip_prefix(content: str) -> str:
    m = _DATE_PREFIX.match(content)
    return content[m.end():].lstrip() if m else content


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class MemoryEntry:
    id: int
    mem_type: str
    timestamp: str
    content: str
    refs: tuple[int, ...] = ()
    origin: str = "add"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "mem_type": self.mem_type,
            "timestamp": self.timestamp,
            "content": self.content,
            "refs": list(self.refs),
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryEntry":
        return cls(
            id=int(d["id"]),
            mem_type=d["mem_type"],
            timestamp=d["timestamp"],
            content=d["content"],
            refs=tuple(int(r) for r in d.get("refs", ())),
            origin=d.get("origin", "add"),
        )


@dataclass(frozen=True)
class CoreBlock:
    text: str = ""
    capacity_chars: int = DEFAULT_CORE_CAPACITY

    def __post_init__(self):
        if self.capacity_chars <= 0:
            raise ValueError("capacity_chars must be positive")


@dataclass(frozen=True)
class CoreOp:
    kind: str  # Append | Replace | Rewrite
    content: str = ""
    old_text: str = ""
    new_text: str = ""

    def __post_init__(self):
        if self.kind not in ACTION_SPACES[CORE]:
            raise IllegalAction(f"{self.kind!r} is not a core action")
        if self.kind == "Replace" and not self.old_text:
            raise ValueError("Replace requires a non-empty old_text")


@dataclass(frozen=True)
class EntryOp:
    kind: str  # Add | Update | Merge | Skip
    memory_content: str = ""
    target_refs: tuple[int, ...] = ()
    skip_reason: str = ""


@dataclass(frozen=True)
class MemoryBank:
    core: CoreBlock = field(default_factory=CoreBlock)
    episodic: tuple[MemoryEntry, ...] = ()
    semantic: tuple[MemoryEntry, ...] = ()
    procedural: tuple[MemoryEntry, ...] = ()
    session_cursor: int = 0
    next_id: int = 1

    @classmethod
    def empty(cls, capacity_chars: int = DEFAULT_CORE_CAPACITY) -> "MemoryBank":
        return cls(core=CoreBlock("", capacity_chars))

    def section(self, mem_type: str) -> tuple[MemoryEntry, ...]:
        if mem_type not in ENTRY_TYPES:
            raise KeyError(mem_type)
        return getattr(self, mem_type)

    def entries(self) -> list[MemoryEntry]:
        return [*self.episodic, *self.semantic, *self.procedural]

    def get(self, entry_id: int) -> MemoryEntry | None:
        for e in self.entries():
            if e.id == entry_id:
                return e
        return None

    def with_core_text(self, text: str) -> "MemoryBank":
        return dataclasses.replace(self, core=dataclasses.replace(self.core, text=text))

    def with_cursor(self, cursor: int) -> "MemoryBank":
        return dataclasses.replace(self, session_cursor=cursor)


# ---------------------------------------------------------------------------
# operations


def apply_core_op(
    bank: MemoryBank, op: CoreOp, tokenizer: Tokenizer = token_count
) -> tuple[MemoryBank, int]:
    """Apply one Core operation; returns the new bank and the token delta.

    Capacity is not enforced here.
    """
    old = bank.core.text
    if op.kind == "Append":
        new = f"{old}\n{op.content}" if old else op.content
    elif op.kind == "Replace":
        if op.old_text not in old:
            raise ReplaceTargetNotFound(f"text to replace not found in core: {op.old_text[:60]!r}")
        new = old.replace(op.old_text, op.new_text, 1)
    else:
        new = op.content
    return bank.with_core_text(new), tokenizer(new) - tokenizer(old)


def apply_entry_ops(
    bank: MemoryBank,
    mem_type: str,
    ops: Sequence[EntryOp],
    session_date: dt.date | str,
) -> MemoryBank:
    """Append the entries produced by ``ops`` to one section.

    Existing entries are never modified or removed.
    """
    allowed = ACTION_SPACES[mem_type]
    section = list(bank.section(mem_type))
    by_id = {e.id: e for e in section}
    next_id = bank.next_id
    day = _as_date(session_date)

    for op in ops:
        if op.kind not in allowed:
            raise IllegalAction(f"{op.kind} is not allowed for {mem_type} memory")
        if op.kind == "Skip":
            continue
        if op.kind == "Update" and len(op.target_refs) != 1:
            raise IllegalAction("Update needs exactly one target")
        if op.kind == "Merge" and len(set(op.target_refs)) < 2:
            raise IllegalAction("Merge needs at least two distinct targets")
        if op.kind == "Add" and op.target_refs:
            raise IllegalAction("Add takes no targets")
        missing = [t for t in op.target_refs if t not in by_id]
        if missing:
            raise DanglingReference(f"{mem_type} entries {missing} do not exist")

        content = op.memory_content
        if mem_type == EPISODIC:
            if op.kind == "Merge":
                spans = [parse_span(by_id[t].timestamp) for t in op.target_refs]
                timestamp = format_span(min(s for s, _ in spans), max(e for _, e in spans))
                content = f"{timestamp}: {_strip_prefix(content)}"
            else:
                timestamp = date_prefix(content)
                if timestamp is None:
                    timestamp = day.isoformat()
                    content = f"{timestamp}: {content}"
        else:
            timestamp = day.isoformat()

        refs = tuple(dict.fromkeys(op.target_refs))
        entry = MemoryEntry(next_id, mem_type, timestamp, content, refs, op.kind.lower())
        section.append(entry)
        by_id[entry.id] = entry
        next_id += 1

    return dataclasses.replace(bank, **{mem_type: tuple(section)}, next_id=next_id)


# ---------------------------------------------------------------------------
# integrity


def bank_violations(bank: MemoryBank) -> list[str]:
    """Every broken invariant in ``bank``, as readable strings (empty if sound)."""
    problems = []
    if len(bank.core.text) > bank.core.capacity_chars:
        problems.append(f"core has {len(bank.core.text)} chars > {bank.core.capacity_chars}")
    seen: set[int] = set()
    for mem_type in ENTRY_TYPES:
        section = bank.section(mem_type)
        ids = {e.id for e in section}
        for e in section:
            if e.id in seen:
                problems.append(f"duplicate id {e.id}")
            seen.add(e.id)
            if e.id >= bank.next_id:
                problems.append(f"id {e.id} not below next_id {bank.next_id}")
            if e.mem_type != mem_type:
                problems.append(f"entry {e.id} filed under {mem_type} but typed {e.mem_type}")
            for r in e.refs:
                if r not in ids:
                    problems.append(f"entry {e.id} references missing {mem_type} entry {r}")
                if r >= e.id:
                    problems.append(f"entry {e.id} references non-older entry {r}")
            expected = {"add": lambda n: n == 0, "update": lambda n: n == 1, "merge": lambda n: n >= 2}
            if e.origin not in expected or not expected[e.origin](len(e.refs)):
                problems.append(f"entry {e.id} origin {e.origin} with {len(e.refs)} refs")
            if mem_type == EPISODIC and date_prefix(e.content) != e.timestamp:
                problems.append(f"entry {e.id} content prefix disagrees with {e.timestamp}")
    return problems


def update_chain(bank: MemoryBank, entry_id: int) -> list[MemoryEntry]:
    """Follow Update refs from ``entry_id`` back to the originating entry."""
    chain = []
    current = bank.get(entry_id)
    while current is not None:
        chain.append(current)
        if current.origin != "update":
            break
        current = bank.get(current.refs[0])
    return chain


# ---------------------------------------------------------------------------
# persistence


def _meta(bank: MemoryBank) -> dict:
    return {
        "capacity_chars": bank.core.capacity_chars,
        "session_cursor": bank.session_cursor,
        "next_id": bank.next_id,
    }


def _jsonl(entries: Iterable[MemoryEntry]) -> str:
    return "".join(json.dumps(e.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for e in entries)


def save_bank(bank: MemoryBank, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "core.txt").write_text(bank.core.text, encoding="utf-8")
    for mem_type in ENTRY_TYPES:
        (d / f"{mem_type}.jsonl").write_text(_jsonl(bank.section(mem_type)), encoding="utf-8")
    (d / "bank.json").write_text(json.dumps(_meta(bank), sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_bank(directory: str | Path) -> MemoryBank:
    d = Path(directory)
    meta = json.loads((d / "bank.json").read_text(encoding="utf-8")) if (d / "bank.json").exists() else {}
    sections = {}
    for mem_type in ENTRY_TYPES:
        path = d / f"{mem_type}.jsonl"
        lines = path.read_text(encoding="utf-8").splitlines() if path.exists() else []
        sections[mem_type] = tuple(MemoryEntry.from_dict(json.loads(x)) for x in lines if x.strip())
    all_ids = [e.id for s in sections.values() for e in s]
    return MemoryBank(
        core=CoreBlock(
            (d / "core.txt").read_text(encoding="utf-8"),
            meta.get("capacity_chars", DEFAULT_CORE_CAPACITY),
        ),
        session_cursor=meta.get("session_cursor", 0),
        next_id=meta.get("next_id", max(all_ids, default=0) + 1),
        **sections,
    )


def bank_digest(bank: MemoryBank) -> str:
    """SHA-256 over the canonical on-disk representation."""
    h = hashlib.sha256()
    h.update(json.dumps(_meta(bank), sort_keys=True).encode())
    h.update(b"\0core\0" + bank.core.text.encode("utf-8"))
    for mem_type in ENTRY_TYPES:
        h.update(f"\0{mem_type}\0".encode() + _jsonl(bank.section(mem_type)).encode("utf-8"))
    return h.hexdigest()
