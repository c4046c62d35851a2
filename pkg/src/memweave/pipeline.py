"""Orchestration: session-by-session construction, synthetic QA, rollouts, evaluation.

Work-directory layout::

    banks/<dialogue>/session_000/   bank before the first session (empty)
    banks/<dialogue>/session_<i>/   bank after i sessions, plus vectors.jsonl
    banks/<dialogue>/manifest.json  completed sessions and their digests
    expert_lengths.json             per-session entry token counts of the build
    qa.jsonl  rewards.jsonl  report.csv  predictions.jsonl
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .actions import ValidityReport, extract_json_object, validate_rollout
from .adrpo import advantages
from .attribution import weights_from_counts
from .config import Gateways, RunConfig
from .errors import ActionError, MemweaveError
from .gateway import ChatRequest
from .ingest import Dialogue, Session
from .memory import (
    CORE,
    ENTRY_TYPES,
    MemoryBank,
    apply_core_op,
    apply_entry_ops,
    bank_digest,
    load_bank,
    save_bank,
    token_count,
)
from .prompts import PromptSet
from .qa import NONE_TEXT, answer_question, format_memories, judge_answer, retrieve_entries
from .reward import RewardRecord, evaluate_rollout, length_penalties, make_record
from .store import RetrievalResult, VectorStore

logger = logging.getLogger(__name__)

QTYPES = ("single_session", "multi_session", "temporal_reasoning")
AGENT_TYPES = (CORE, *ENTRY_TYPES)


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _slug(dialogue_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", dialogue_id) or "_"


# ---------------------------------------------------------------------------
# one construction step


@dataclass
class StepResult:
    bank: MemoryBank
    store: VectorStore
    report: ValidityReport
    core_delta: int
    new_tokens: dict[str, int]
    compression: str  # none | compress | aggressive | truncate
    retrieval: RetrievalResult


def _prompts(cfg: RunConfig) -> PromptSet:
    return PromptSet(cfg.prompts_dir)


def _agent_outputs(bank, memories, session: Session, gateways: Gateways, prompts, *, seed, temperature):
    values = {
        "core": bank.core.text or NONE_TEXT,
        "capacity": bank.core.capacity_chars,
        "memories": memories,
        "date": session.timestamp.isoformat(),
        "session": session.render(),
    }

    def call(mem_type):
        system, user = prompts[mem_type].render(**values)
        return gateways.agent.chat(ChatRequest(system, user, temperature=temperature, seed=seed, tag=mem_type))

    with ThreadPoolExecutor(max_workers=len(AGENT_TYPES)) as pool:
        outputs = list(pool.map(call, AGENT_TYPES))
    return dict(zip(AGENT_TYPES, outputs))


def compress_core(bank: MemoryBank, gateway, prompts: PromptSet, *, seed=None) -> tuple[MemoryBank, str]:
    """Bring Core under capacity: one compression prompt, a harsher one, then truncation."""
    capacity = bank.core.capacity_chars
    text = bank.core.text
    if len(text) <= capacity:
        return bank, "none"
    for name, label in (("compress", "compress"), ("compress_aggressive", "aggressive")):
        system, user = prompts[name].render(core=text, limit=capacity)
        out = gateway.chat(ChatRequest(system, user, temperature=0.0, seed=seed, tag=name)).strip()
        if out and len(out) <= capacity:
            return bank.with_core_text(out), label
        logger.info("%s pass left core at %d chars (limit %d)", name, len(out), capacity)
        if out:
            text = out
    logger.warning("core still over capacity after compression; truncating to %d chars", capacity)
    return bank.with_core_text(text[:capacity]), "truncate"


def construct_step(
    bank: MemoryBank,
    store: VectorStore,
    session: Session,
    cursor: int,
    cfg: RunConfig,
    gateways: Gateways,
    prompts: PromptSet | None = None,
    *,
    seed: int | None = None,
    temperature: float = 0.0,
) -> StepResult:
    """Process one session against a frozen snapshot; inputs are left untouched.

    Invalid agent outputs are logged and that agent's operations skipped.
    """
    prompts = prompts or _prompts(cfg)
    embed_fn = gateways.embed_fn
    query = session.render() or session.timestamp.isoformat()
    retrieved, trace = retrieve_entries(bank, store, query, cfg.k_construct, embed_fn)
    raw = _agent_outputs(
        bank, format_memories(retrieved), session, gateways, prompts, seed=seed, temperature=temperature
    )
    report = validate_rollout(
        raw[CORE], raw["episodic"], raw["semantic"], raw["procedural"], bank, embed_fn, cfg.resolve_threshold, store
    )
    for mem_type, diags in report.diagnostics().items():
        if diags:
            logger.warning("session %d: %s agent output rejected: %s", cursor, mem_type, "; ".join(diags))

    new = bank
    core_delta = 0
    core_report = report.per_type[CORE]
    if core_report.valid:
        new, core_delta = apply_core_op(new, core_report.core_op)
    new_tokens = {}
    for mem_type in ENTRY_TYPES:
        tv = report.per_type[mem_type]
        before = len(new.section(mem_type))
        if tv.valid:
            new = apply_entry_ops(new, mem_type, tv.entry_ops, session.timestamp)
        new_tokens[mem_type] = sum(token_count(e.content) for e in new.section(mem_type)[before:])

    new, compression = compress_core(new, gateways.agent, prompts, seed=seed)

    old_ids = {e.id for e in bank.entries()}
    added = [e for e in new.entries() if e.id not in old_ids]
    new_store = store.copy().upsert(added, embed_fn)
    return StepResult(new.with_cursor(cursor), new_store, report, core_delta, new_tokens, compression, trace)


# ---------------------------------------------------------------------------
# trajectory checkpoints


class Trajectory:
    """Snapshots 𝓜_0..𝓜_n of one dialogue on disk."""

    def __init__(self, root: str | Path, dialogue_id: str):
        self.dialogue_id = dialogue_id
        self.dir = Path(root) / "banks" / _slug(dialogue_id)

    def snapshot_dir(self, i: int) -> Path:
        return self.dir / f"session_{i:03d}"

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"dialogue_id": self.dialogue_id, "completed": -1, "digests": [], "steps": []}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def save(self, i: int, bank: MemoryBank, store: VectorStore, step_info: dict | None, n_sessions: int) -> None:
        d = self.snapshot_dir(i)
        save_bank(bank, d)
        store.save(d / "vectors.jsonl")
        m = self.manifest()
        m["digests"] = m["digests"][:i] + [bank_digest(bank)]
        m["steps"] = m["steps"][: max(i - 1, 0)] + ([step_info] if step_info is not None else [])
        m["completed"] = i
        m["n_sessions"] = n_sessions
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(_dump(m) + "\n", encoding="utf-8")
        tmp.replace(self.manifest_path)

    def load(self, i: int) -> tuple[MemoryBank, VectorStore]:
        d = self.snapshot_dir(i)
        bank = load_bank(d)
        expected = self.manifest()["digests"][i]
        if bank_digest(bank) != expected:
            raise MemweaveError(f"snapshot {d} does not match its manifest digest")
        vectors = d / "vectors.jsonl"
        store = VectorStore.load(vectors) if vectors.exists() and vectors.stat().st_size else VectorStore()
        return bank, store

    @property
    def completed(self) -> int:
        return self.manifest()["completed"]

    def final(self) -> tuple[MemoryBank, VectorStore]:
        return self.load(self.completed)


@dataclass
class BuildResult:
    dialogue_id: str
    banks: list[MemoryBank]
    steps: list[dict]
    resumed_from: int

    @property
    def final(self) -> MemoryBank:
        return self.banks[-1]


def build_memory(
    dialogue: Dialogue,
    cfg: RunConfig,
    gateways: Gateways,
    work_dir: str | Path | None = None,
    *,
    stop_after: int | None = None,
    resume: bool = True,
) -> BuildResult:
    """Sequential construction over all sessions, checkpointing after each one.

    ``stop_after`` ends the run after that many sessions in total (a
    deliberate interruption; the next call resumes).
    """
    root = Path(work_dir) if work_dir is not None else cfg.work_path
    traj = Trajectory(root, dialogue.dialogue_id)
    prompts = _prompts(cfg)
    n = len(dialogue.sessions)
    start = traj.completed if resume else -1

    if start < 0:
        bank, store = MemoryBank.empty(cfg.core_capacity), VectorStore()
        traj.save(0, bank, store, None, n)
        start = 0
    else:
        logger.info("resuming %s after %d sessions", dialogue.dialogue_id, start)
    banks = [traj.load(i)[0] for i in range(start + 1)]
    bank, store = traj.load(start)
    steps = list(traj.manifest()["steps"])

    limit = n if stop_after is None else min(n, stop_after)
    for i in range(start, limit):
        step = construct_step(bank, store, dialogue.sessions[i], i + 1, cfg, gateways, prompts, seed=cfg.seed)
        info = {
            "session": i + 1,
            "date": dialogue.sessions[i].timestamp.isoformat(),
            "valid": step.report.type_flags(),
            "core_delta": step.core_delta,
            "new_tokens": step.new_tokens,
            "compression": step.compression,
        }
        bank, store = step.bank, step.store
        traj.save(i + 1, bank, store, info, n)
        steps.append(info)
        banks.append(bank)
    return BuildResult(dialogue.dialogue_id, banks, steps, start)


def expert_lengths_from_steps(steps: Sequence[dict]) -> dict[str, dict[str, int]]:
    """Session index (0-based, as a string key) -> per-type token counts; zero counts dropped."""
    return {
        str(s["session"] - 1): {m: n for m, n in s["new_tokens"].items() if n > 0} for s in steps
    }


def write_expert_lengths(results: Iterable[BuildResult], path: str | Path) -> None:
    table = {r.dialogue_id: expert_lengths_from_steps(r.steps) for r in results}
    Path(path).write_text(_dump(table) + "\n", encoding="utf-8")


def load_expert_lengths(path: str | Path | None) -> dict | None:
    if path is None or not Path(path).exists():
        return None
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# synthetic QA


@dataclass(frozen=True)
class QaPair:
    question: str
    answer: str
    qtype: str


def parse_qa_pairs(raw: str, limit: int) -> list[QaPair]:
    """Strict parse of ``{"qa_pairs": [...]}``; raises ActionError on any malformed pair."""
    obj = extract_json_object(raw)
    items = obj.get("qa_pairs")
    if not isinstance(items, list) or not items:
        raise ActionError("qa_pairs must be a non-empty list")
    pairs = []
    for item in items[:limit]:
        if not isinstance(item, dict):
            raise ActionError("each QA pair must be an object")
        q, a = item.get("question"), item.get("answer")
        qtype = str(item.get("type", item.get("qtype", ""))).strip().lower().replace("-", "_").replace(" ", "_")
        if not isinstance(q, str) or not q.strip() or not isinstance(a, str) or not a.strip():
            raise ActionError("QA pair needs non-empty question and answer strings")
        if qtype not in QTYPES:
            raise ActionError(f"unknown question type {qtype!r}")
        pairs.append(QaPair(q.strip(), a.strip(), qtype))
    return pairs


def generate_session_qa(
    dialogue: Dialogue, cfg: RunConfig, gateways: Gateways, work_dir: str | Path | None = None
) -> dict[int, list[QaPair]]:
    """J pairs per session, generated from the session plus memories retrieved from the prior bank.

    Malformed output is retried once; a second failure skips the session.
    """
    root = Path(work_dir) if work_dir is not None else cfg.work_path
    traj = Trajectory(root, dialogue.dialogue_id)
    prompts = _prompts(cfg)
    out: dict[int, list[QaPair]] = {}
    for i, session in enumerate(dialogue.sessions):
        bank, store = traj.load(i)
        query = session.render() or session.timestamp.isoformat()
        retrieved, _ = retrieve_entries(bank, store, query, cfg.k_qa_gen, gateways.embed_fn)
        system, user = prompts["qa_gen"].render(
            memories=format_memories(retrieved),
            date=session.timestamp.isoformat(),
            session=session.render(),
            n=cfg.n_questions,
        )
        req = ChatRequest(system, user, temperature=0.0, seed=cfg.seed, tag="qa_gen")
        for attempt in (1, 2):
            try:
                out[i] = parse_qa_pairs(gateways.qa_gen.chat(req), cfg.n_questions)
                break
            except ActionError as exc:
                logger.warning("%s session %d: malformed QA output (attempt %d): %s", dialogue.dialogue_id, i, attempt, exc)
        else:
            logger.warning("%s session %d: skipped, no usable QA pairs", dialogue.dialogue_id, i)
    return out


def write_qa(qa_sets: dict[str, dict[int, list[QaPair]]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dialogue_id, sessions in qa_sets.items():
            for i in sorted(sessions):
                for p in sessions[i]:
                    fh.write(
                        _dump({"dialogue_id": dialogue_id, "session_index": i, "question": p.question,
                               "answer": p.answer, "qtype": p.qtype})
                        + "\n"
                    )


def read_qa(path: str | Path) -> dict[str, dict[int, list[QaPair]]]:
    out: dict[str, dict[int, list[QaPair]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.setdefault(r["dialogue_id"], {}).setdefault(int(r["session_index"]), []).append(
                    QaPair(r["question"], r["answer"], r["qtype"])
                )
    return out


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutOutcome:
    rollout: int
    seed: int
    record: RewardRecord
    weights: dict[str, float]
    dominant: str | None
    advantage: float = 0.0
    error: str | None = None
    diagnostics: dict[str, list[str]] = field(default_factory=dict)
    bank: MemoryBank | None = None

    def to_dict(self) -> dict:
        return {
            "rollout": self.rollout,
            "seed": self.seed,
            **self.record.to_dict(),
            "weights": self.weights,
            "dominant": self.dominant,
            "advantage": self.advantage,
            "error": self.error,
            "diagnostics": self.diagnostics,
        }


def _failed_record() -> RewardRecord:
    return make_record(False, [], {}, {}, r_task=0.0)


def rollout_and_reward(
    dialogue: Dialogue,
    session_index: int,
    qa_pairs: Sequence[QaPair],
    cfg: RunConfig,
    gateways: Gateways,
    work_dir: str | Path | None = None,
    *,
    expert: dict | None = None,
) -> list[RolloutOutcome]:
    """N isolated candidate banks for one session, each scored on the session's questions.

    A failing rollout yields an invalid record instead of aborting the group.
    """
    root = Path(work_dir) if work_dir is not None else cfg.work_path
    bank, store = Trajectory(root, dialogue.dialogue_id).load(session_index)
    session = dialogue.sessions[session_index]
    prompts = _prompts(cfg)
    pairs = [(p.question, p.answer) for p in qa_pairs]
    expert_tokens = None
    if expert is not None:
        expert_tokens = expert.get(dialogue.dialogue_id, {}).get(str(session_index))

    def one(i: int) -> RolloutOutcome:
        seed = cfg.seed + i
        try:
            step = construct_step(
                bank, store, session, session_index + 1, cfg, gateways, prompts,
                seed=seed, temperature=cfg.rollout_temperature,
            )
            penalties = length_penalties(step.core_delta, step.new_tokens, expert_tokens, cfg.penalties)
            record = evaluate_rollout(
                step.bank, pairs, gateways.answer, gateways.judge, step.store, cfg.k_answer,
                embed_fn=gateways.embed_fn, valid=step.report.valid, penalties=penalties,
                params=cfg.penalties, type_valid=step.report.type_flags(), ell_mode=cfg.ell_mode,
                prompts=prompts,
            )
            diagnostics = {k: v for k, v in step.report.diagnostics().items() if v}
            error, candidate = None, step.bank
        except MemweaveError as exc:
            logger.warning("%s session %d rollout %d failed: %s", dialogue.dialogue_id, session_index, i, exc)
            record, diagnostics, error, candidate = _failed_record(), {}, f"{type(exc).__name__}: {exc}", None
        w = weights_from_counts(record.retrieval_counts, cfg.adrpo.alpha)
        return RolloutOutcome(i, seed, record, w.weights, w.dominant, error=error, diagnostics=diagnostics, bank=candidate)

    with ThreadPoolExecutor(max_workers=min(cfg.max_in_flight, cfg.n_rollouts)) as pool:
        outcomes = list(pool.map(one, range(cfg.n_rollouts)))
    if len(outcomes) >= 2:
        adv = advantages([o.record.reward for o in outcomes], cfg.adrpo.adv_eps)
        for o, a in zip(outcomes, adv):
            o.advantage = float(a)
    return outcomes


def write_rewards(rows: Iterable[tuple[str, int, list[RolloutOutcome]]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dialogue_id, session_index, outcomes in rows:
            for o in outcomes:
                fh.write(_dump({"dialogue_id": dialogue_id, "session_index": session_index, **o.to_dict()}) + "\n")


# ---------------------------------------------------------------------------
# answering and evaluation


def answer(question: str, bank: MemoryBank, store: VectorStore, cfg: RunConfig, gateways: Gateways):
    """Reply from Core plus the top-k_answer pooled entries, with the retrieval trace."""
    return answer_question(question, bank, store, gateways.answer, gateways.embed_fn, cfg.k_answer, _prompts(cfg))


@dataclass
class EvalReport:
    rows: list[dict]  # one per question
    by_category: dict[str, tuple[int, int]]  # category -> (correct, total)

    @property
    def overall(self) -> float:
        total = sum(t for _, t in self.by_category.values())
        return 100.0 * sum(c for c, _ in self.by_category.values()) / total if total else 0.0

    def accuracy(self, category: str) -> float:
        c, t = self.by_category[category]
        return 100.0 * c / t

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "correct", "total", "accuracy"])
        for cat in sorted(self.by_category):
            c, t = self.by_category[cat]
            w.writerow([cat, c, t, f"{100.0 * c / t:.2f}"])
        total = sum(t for _, t in self.by_category.values())
        w.writerow(["overall", sum(c for c, _ in self.by_category.values()), total, f"{self.overall:.2f}"])
        return buf.getvalue()

    def table(self) -> str:
        width = max([len("category"), len("overall"), *map(len, self.by_category)])
        lines = [f"{'category':<{width}}  {'n':>5}  {'acc %':>7}"]
        for cat in sorted(self.by_category):
            c, t = self.by_category[cat]
            lines.append(f"{cat:<{width}}  {t:>5}  {100.0 * c / t:>7.2f}")
        total = sum(t for _, t in self.by_category.values())
        lines.append(f"{'overall':<{width}}  {total:>5}  {self.overall:>7.2f}")
        return "\n".join(lines)


def evaluate(dialogues: Sequence[Dialogue], cfg: RunConfig, gateways: Gateways, work_dir: str | Path | None = None) -> EvalReport:
    """Answer every benchmark question from the final bank and judge it.

    A question whose answering or judging fails is scored incorrect and flagged.
    """
    root = Path(work_dir) if work_dir is not None else cfg.work_path
    prompts = _prompts(cfg)
    rows, by_cat = [], {}
    for d in dialogues:
        bank, store = Trajectory(root, d.dialogue_id).final()
        for n, q in enumerate(d.questions):
            flagged, reply = None, ""
            try:
                reply, trace = answer_question(
                    q.question, bank, store, gateways.answer, gateways.embed_fn, cfg.k_answer, prompts
                )
                correct = judge_answer(q.question, q.gold_answer, reply, gateways.judge, prompts)
            except MemweaveError as exc:
                correct, flagged = False, f"{type(exc).__name__}: {exc}"
                logger.warning("%s question %d scored incorrect: %s", d.dialogue_id, n, flagged)
            cat = q.category or "uncategorized"
            c, t = by_cat.get(cat, (0, 0))
            by_cat[cat] = (c + int(correct), t + 1)
            rows.append({
                "dialogue_id": d.dialogue_id, "index": n, "category": cat, "question": q.question,
                "gold_answer": q.gold_answer, "response": reply, "correct": correct, "error": flagged,
            })
    return EvalReport(rows, by_cat)


def write_report(report: EvalReport, work_dir: str | Path) -> Path:
    root = Path(work_dir)
    (root / "report.csv").write_text(report.csv_text(), encoding="utf-8")
    with open(root / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for r in report.rows:
            fh.write(_dump(r) + "\n")
    return root / "report.csv"

