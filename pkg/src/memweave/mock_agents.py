"""Deterministic rule-based stand-in for every model role.

Used by the ``mock_hash`` backend so the whole pipeline can run offline and
bit-reproducibly.  It reads the section headers of the bundled prompt
templates (``## SESSION (date)``, ``## RETRIEVED MEMORIES`` ...) and emits
well-formed outputs for each role.  It is a fixture, not a model: the
outputs are plausible enough to exercise retrieval, update chains, QA and
judging end to end.

The request ``seed`` selects between a few behaviour variants so that
rollouts in one group differ.
"""

from __future__ import annotations

import json
import re
from typing import Callable

from .gateway import ChatRequest

_HEADER = re.compile(r"^## (.+?)\s*$", re.MULTILINE)
_WORD = re.compile(r"\w+")
_STOP = frozenset(
    "a an the and or but to of in on at for with is are was were be been i you he she it we they my your "
    "me our their this that what when where who how which did do does have has had about from as by".split()
)


def sections(text: str) -> dict[str, str]:
    """Split a rendered prompt into ``{header: body}``."""
    out = {}
    matches = list(_HEADER.finditer(text))
    for n, m in enumerate(matches):
        end = matches[n + 1].start() if n + 1 < len(matches) else len(text)
        out[m.group(1)] = text[m.end():end].strip("\n")
    return out


def _session(secs: dict[str, str]) -> tuple[str, list[tuple[str, str]]]:
    for header, body in secs.items():
        if header.startswith("SESSION"):
            date = header[header.find("(") + 1 : header.rfind(")")]
            turns = []
            for line in body.splitlines():
                speaker, sep, text = line.partition(": ")
                if sep and text.strip():
                    turns.append((speaker.strip(), text.strip()))
            return date, turns
    return "", []


def _memories(secs: dict[str, str]) -> list[tuple[str, str]]:
    out = []
    for line in secs.get("RETRIEVED MEMORIES", "").splitlines():
        m = re.match(r"^\[(EPISODIC|SEMANTIC|PROCEDURAL)\] (.*)$", line)
        if m:
            out.append((m.group(1).lower(), m.group(2)))
    return out


def _words(text: str) -> list[str]:
    return [w for w in _WORD.findall(text.lower()) if w not in _STOP]


def _clip(text: str, n: int) -> str:
    words = text.split()
    return " ".join(words[:n])


class HeuristicResponder:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self._handlers: dict[str, Callable[[ChatRequest, dict], str]] = {
            "core": self._core,
            "episodic": self._episodic,
            "semantic": self._semantic,
            "procedural": self._procedural,
            "compress": self._compress,
            "compress_aggressive": self._compress_aggressive,
            "qa_gen": self._qa_gen,
            "answer": self._answer,
            "judge": self._judge,
        }

    def __call__(self, req: ChatRequest) -> str:
        handler = self._handlers.get(req.tag)
        if handler is None:
            return "OK"
        return handler(req, sections(req.user_content))

    def _variant(self, req: ChatRequest) -> int:
        return (req.seed or 0) % 3

    # -- memory agents -----------------------------------------------------

    def _core(self, req, secs):
        date, turns = _session(secs)
        if not turns:
            return json.dumps({"operation": "APPEND", "content": f"Active on {date}"})
        speaker, text = turns[0]
        fact = f"{speaker} ({date}): {_clip(text, 12 if self._variant(req) else 30)}"
        core = secs.get("CURRENT CORE MEMORY", "")
        lines = [ln for ln in core.splitlines() if ln.strip() and ln.strip() != "(none)"]
        prefix = f"{speaker} ("
        if self._variant(req) == 2 and lines:
            return json.dumps({"operation": "REWRITE", "content": "\n".join(lines[-3:] + [fact])})
        for ln in lines:
            if ln.startswith(prefix):
                return json.dumps({"operation": "REPLACE", "old_text": ln, "new_text": fact})
        return json.dumps({"operation": "APPEND", "content": fact})

    def _episodic(self, req, secs):
        date, turns = _session(secs)
        ops = []
        if turns:
            summary = _clip(turns[0][1], 10)
            details = " ".join(f"{s} said {_clip(t, 25)}" for s, t in turns[:3])
            ops.append({"action": "ADD", "memory": f"{date}: {summary} | Details: {details}"})
        prior = [c for t, c in _memories(secs) if t == "episodic"]
        variant = self._variant(req)
        if prior and turns and variant != 1:
            ops.append(
                {
                    "action": "UPDATE",
                    "old_memory": prior[0],
                    "memory": f"{date}: follow-up on {_clip(prior[0], 6)} | Details: {_clip(turns[-1][1], 20)}",
                }
            )
        if len(prior) >= 2 and variant == 2:
            ops.append(
                {
                    "action": "MERGE",
                    "old_memories": prior[:2],
                    "memory": f"{date}: timeline of related events | Details: {_clip(prior[0], 8)}; {_clip(prior[1], 8)}",
                }
            )
        return json.dumps({"operations": ops})

    def _semantic(self, req, secs):
        _, turns = _session(secs)
        ops = []
        for speaker, text in turns[: 2 + self._variant(req)]:
            if len(_words(text)) < 3:
                ops.append({"action": "SKIP", "reason": "too little content to store"})
            else:
                ops.append({"action": "ADD", "memory": f"{speaker} - {_clip(text, 30)}"})
        return json.dumps({"operations": ops})

    def _procedural(self, req, secs):
        _, turns = _session(secs)
        ops = []
        for speaker, text in turns:
            low = text.lower()
            if any(k in low for k in ("step", "routine", "first", "then", "recipe")):
                ops.append({"action": "ADD", "memory": f"{speaker}'s procedure | Steps: {_clip(text, 30)}"})
                break
        return json.dumps({"operations": ops})

    def _compress(self, req, secs, keep: float = 0.6):
        core = secs.get("CORE MEMORY", "")
        limit = int(secs.get("LIMIT", "5000").strip() or 5000)
        lines = [ln for ln in core.splitlines() if ln.strip()]
        kept = lines[-max(1, int(len(lines) * keep)):]
        text = "\n".join(_clip(ln, 15) for ln in kept)
        return text if keep < 0.5 else text[: int(limit * 1.2)]

    def _compress_aggressive(self, req, secs):
        return self._compress(req, secs, keep=0.3)

    # -- evaluation roles --------------------------------------------------

    def _qa_gen(self, req, secs):
        date, turns = _session(secs)
        n = int(secs.get("NUMBER OF QUESTIONS", "5").strip() or 5)
        kinds = ("single_session", "multi_session", "temporal_reasoning")
        pairs = []
        for j in range(n):
            if not turns:
                break
            speaker, text = turns[j % len(turns)]
            cue = " ".join(_words(text)[:4]) or "the conversation"
            kind = kinds[j % 3]
            if kind == "temporal_reasoning":
                question = f"On what date did {speaker} mention {cue}?"
                answer = date
            else:
                question = f"What did {speaker} say about {cue}?"
                answer = _clip(text, 12)
            pairs.append({"question": question, "answer": answer, "type": kind})
        return json.dumps({"qa_pairs": pairs})

    def _answer(self, req, secs):
        question = secs.get("QUESTION", "")
        qwords = set(_words(question))
        candidates = [c for _, c in _memories(secs)]
        candidates += [ln for ln in secs.get("CORE MEMORY", "").splitlines() if ln.strip() and ln != "(none)"]
        best, best_score = None, 0
        for c in candidates:
            score = len(qwords & set(_words(c)))
            if score > best_score:
                best, best_score = c, score
        return best if best else "The information is not available."

    def _judge(self, req, secs):
        gold = _words(secs.get("GOLD ANSWER", ""))
        response = set(_words(secs.get("RESPONSE", "")))
        if not gold:
            return "INCORRECT"
        hit = sum(w in response for w in gold) / len(gold)
        return "CORRECT" if hit >= 0.6 else "INCORRECT"
