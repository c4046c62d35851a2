"""Answer phase: Core + retrieved entries -> answer model -> judge verdict."""

from __future__ import annotations

import logging
import re
from typing import Iterable

from .gateway import ChatRequest
from .memory import MemoryBank, MemoryEntry
from .prompts import PromptSet, default_prompts
from .store import RetrievalResult, VectorStore

logger = logging.getLogger(__name__)

NONE_TEXT = "(none)"


def format_memories(entries: Iterable[MemoryEntry]) -> str:
    lines = [f"[{e.mem_type.upper()}] {e.content}" for e in entries]
    return "\n".join(lines) if lines else NONE_TEXT


def retrieve_entries(
    bank: MemoryBank, store: VectorStore, query: str, k: int, embed_fn
) -> tuple[list[MemoryEntry], RetrievalResult]:
    """Pooled top-k over all three entry sections."""
    if store.size() == 0:
        return [], RetrievalResult(query, ())
    result = store.top_k(query, k, embed_fn)
    entries = [e for e in (bank.get(i) for i in result.ids) if e is not None]
    return entries, result


def answer_question(
    question: str,
    bank: MemoryBank,
    store: VectorStore,
    answer_gw,
    embed_fn,
    k_answer: int = 10,
    prompts: PromptSet | None = None,
) -> tuple[str, RetrievalResult]:
    prompts = prompts or default_prompts()
    entries, trace = retrieve_entries(bank, store, question, k_answer, embed_fn)
    system, user = prompts["answer"].render(
        core=bank.core.text or NONE_TEXT, memories=format_memories(entries), question=question
    )
    reply = answer_gw.chat(ChatRequest(system, user, temperature=0.0, tag="answer"))
    return reply, trace


_VERDICT = re.compile(r"^\W*(CORRECT|INCORRECT)\W*$")


def parse_verdict(text: str) -> bool:
    """Strict CORRECT/INCORRECT; anything else counts as incorrect."""
    m = _VERDICT.match((text or "").strip().upper())
    if m is None:
        logger.warning("unparseable judge verdict %r scored as INCORRECT", (text or "")[:80])
        return False
    return m.group(1) == "CORRECT"


def judge_answer(question: str, gold: str, response: str, judge_gw, prompts: PromptSet | None = None) -> bool:
    prompts = prompts or default_prompts()
    system, user = prompts["judge"].render(question=question, gold=gold, response=response or "(empty)")
    return parse_verdict(judge_gw.chat(ChatRequest(system, user, temperature=0.0, tag="judge")))
