"""Dialogue datasets normalized into one canonical shape.

Canonical (``generic``) record, one per JSON list item or JSONL line::

    {"dialogue_id": "d1",
     "sessions": [{"timestamp": "2024-03-15",
                   "turns": [{"speaker": "user", "text": "..."}]}],
     "questions": [{"question": "...", "gold_answer": "...",
                    "question_date": "2024-04-01", "category": "temporal"}]}

LongMemEval, LoCoMo and PerLTQA loaders map their native layouts onto it.
Malformed records are skipped with a warning; the skip reasons are kept on
the :class:`IngestResult`.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import EmptyDataset, UnknownFormat

logger = logging.getLogger(__name__)

FORMATS = ("longmemeval", "locomo", "perltqa", "generic")


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass(frozen=True)
class Session:
    timestamp: dt.date
    turns: tuple[Turn, ...]

    def render(self) -> str:
        return "\n".join(f"{t.speaker}: {t.text}" for t in self.turns)


@dataclass(frozen=True)
class Question:
    question: str
    gold_answer: str
    question_date: dt.date | None = None
    category: str = ""


@dataclass
class Dialogue:
    dialogue_id: str
    sessions: list[Session]
    questions: list[Question] = field(default_factory=list)

    def __post_init__(self):
        dates = [s.timestamp for s in self.sessions]
        for a, b in zip(dates, dates[1:]):
            if b < a:
                raise ValueError(f"dialogue {self.dialogue_id}: session dates out of order ({a} then {b})")
        if dates:
            for q in self.questions:
                if q.question_date is not None and q.question_date < dates[-1]:
                    raise ValueError(
                        f"dialogue {self.dialogue_id}: question dated {q.question_date} before last session {dates[-1]}"
                    )

    def to_dict(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "sessions": [
                {"timestamp": s.timestamp.isoformat(), "turns": [{"speaker": t.speaker, "text": t.text} for t in s.turns]}
                for s in self.sessions
            ],
            "questions": [
                {
                    "question": q.question,
                    "gold_answer": q.gold_answer,
                    "question_date": q.question_date.isoformat() if q.question_date else None,
                    "category": q.category,
                }
                for q in self.questions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dialogue":
        sessions = []
        for s in d["sessions"]:
            turns = tuple(Turn(str(t["speaker"]), str(t["text"])) for t in s["turns"])
            sessions.append(Session(_parse_date(s["timestamp"]), turns))
        questions = [
            Question(
                str(q["question"]),
                str(q.get("gold_answer", q.get("answer", ""))),
                _parse_date(q["question_date"]) if q.get("question_date") else None,
                str(q.get("category", "")),
            )
            for q in d.get("questions", [])
        ]
        return cls(str(d["dialogue_id"]), sessions, questions)


@dataclass
class IngestResult:
    dialogues: list[Dialogue]
    skipped: list[str] = field(default_factory=list)


_DATE_FORMATS = (
    "%Y-%m-%d",
    "%Y/%m/%d",
    "%Y/%m/%d (%a) %H:%M",
    "%I:%M %p on %d %B, %Y",
    "%I:%M %p on %d %b, %Y",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
)


def _parse_date(value: Any) -> dt.date:
    if isinstance(value, dt.date):
        return value
    text = str(value).strip()
    for fmt in _DATE_FORMATS:
        try:
            return dt.datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    m = re.match(r"^(\d{4})[-/](\d{2})[-/](\d{2})", text)
    if m:
        return dt.date(int(m.group(1)), int(m.group(2)), int(m.group(3)))
    raise ValueError(f"unrecognized date {text!r}")


def _read_records(path: Path) -> list:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped[0] == "[":
        return json.loads(text)
    if stripped[0] == "{":
        try:
            obj = json.loads(text)
            return [obj]
        except json.JSONDecodeError:
            pass
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# native layouts


def _from_generic(rec: dict) -> Dialogue:
    return Dialogue.from_dict(rec)


def _from_longmemeval(rec: dict) -> Dialogue:
    """One question per record, with its own haystack of user-assistant sessions."""
    dates = rec["haystack_dates"]
    sessions_raw = rec["haystack_sessions"]
    if len(dates) != len(sessions_raw):
        raise ValueError("haystack_dates and haystack_sessions differ in length")
    pairs = sorted(zip((_parse_date(x) for x in dates), range(len(dates)), sessions_raw))
    sessions = [
        Session(date, tuple(Turn(str(t["role"]), str(t["content"])) for t in turns))
        for date, _, turns in pairs
    ]
    question = Question(
        str(rec["question"]),
        str(rec["answer"]),
        _parse_date(rec["question_date"]) if rec.get("question_date") else None,
        str(rec.get("question_type", "")),
    )
    return Dialogue(str(rec["question_id"]), sessions, [question])


def _from_locomo(rec: dict) -> Dialogue:
    """Human-human conversation with ``session_<n>`` keys and a shared QA list."""
    conv = rec["conversation"]
    numbers = sorted(
        int(m.group(1)) for k in conv if (m := re.fullmatch(r"session_(\d+)", k)) and isinstance(conv[k], list)
    )
    sessions = []
    for n in numbers:
        turns = tuple(Turn(str(t["speaker"]), str(t["text"])) for t in conv[f"session_{n}"])
        sessions.append(Session(_parse_date(conv[f"session_{n}_date_time"]), turns))
    questions = []
    for q in rec.get("qa", []):
        gold = q.get("answer", q.get("adversarial_answer"))
        if gold is None:
            raise ValueError(f"question without answer: {q.get('question')!r}")
        questions.append(Question(str(q["question"]), str(gold), None, str(q.get("category", ""))))
    return Dialogue(str(rec.get("sample_id", "")), sessions, questions)


def _from_perltqa(rec: dict) -> Dialogue:
    """Per-character record: ``{"character", "dialogues": [{"time", "contents"}], "qa": [...]}``.

    ``contents`` items are ``{"speaker", "text"}`` objects or ``"speaker: text"`` strings.
    """
    sessions = []
    for d in rec["dialogues"]:
        turns = []
        for item in d["contents"]:
            if isinstance(item, str):
                speaker, _, text = item.partition(":")
                turns.append(Turn(speaker.strip(), text.strip()))
            else:
                turns.append(Turn(str(item["speaker"]), str(item["text"])))
        sessions.append(Session(_parse_date(d["time"]), tuple(turns)))
    sessions.sort(key=lambda s: s.timestamp)
    questions = [
        Question(str(q["question"]), str(q["answer"]), None, str(q.get("type", q.get("category", ""))))
        for q in rec.get("qa", [])
    ]
    return Dialogue(str(rec["character"]), sessions, questions)


_LOADERS: dict[str, Callable[[dict], Dialogue]] = {
    "generic": _from_generic,
    "longmemeval": _from_longmemeval,
    "locomo": _from_locomo,
    "perltqa": _from_perltqa,
}


def load_dialogues(path: str | Path, fmt: str = "generic") -> IngestResult:
    if fmt not in _LOADERS:
        raise UnknownFormat(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    loader = _LOADERS[fmt]
    result = IngestResult([])
    for n, rec in enumerate(_read_records(Path(path))):
        try:
            dialogue = loader(rec)
            if not dialogue.sessions:
                raise ValueError("no sessions")
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            reason = f"record {n}: {type(exc).__name__}: {exc}"
            logger.warning("skipping %s", reason)
            result.skipped.append(reason)
            continue
        result.dialogues.append(dialogue)
    if not result.dialogues:
        raise EmptyDataset(f"no usable dialogues in {path} ({len(result.skipped)} skipped)")
    return result


def ingest(path: str | Path, fmt: str = "generic") -> list[Dialogue]:
    return load_dialogues(path, fmt).dialogues


def write_dialogues(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(d.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_dialogues(path: str | Path) -> list[Dialogue]:
    return [Dialogue.from_dict(r) for r in _read_records(Path(path))]
