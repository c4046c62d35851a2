"""Session-level reward: synthetic-QA task reward, length penalties, validity gate.

    reward = 1[valid] * r_task * (1 - lambda * ell)

``r_task`` is the judge-verified accuracy on the session's synthetic
questions and ``ell`` aggregates four piecewise-linear length penalties.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .errors import EmptyQuestionSet, GatewayError
from .memory import CORE, ENTRY_TYPES

logger = logging.getLogger(__name__)

PENALTY_KEYS = (CORE, *ENTRY_TYPES)


@dataclass(frozen=True)
class PenaltyParams:
    lam: float = 0.8
    theta_min: float = 150
    theta_max: float = 400
    delta_min: float = 200
    gamma_l: float = 0.5
    gamma_u: float = 1.3
    gamma_min: float = 0.1
    gamma_max: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.theta_min < self.theta_max:
            raise ValueError("theta_min must be < theta_max")
        if not self.gamma_min < self.gamma_l <= self.gamma_u < self.gamma_max:
            raise ValueError("need gamma_min < gamma_l <= gamma_u < gamma_max")
        if self.delta_min < 0:
            raise ValueError("delta_min must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PenaltyParams":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def core_length_penalty(delta_core: float, p: PenaltyParams = PenaltyParams()) -> float:
    """Penalty on the Core token increment: 0 up to theta_min, linear to 1 at theta_max."""
    if delta_core <= p.theta_min:
        return 0.0
    if delta_core >= p.theta_max:
        return 1.0
    return (delta_core - p.theta_min) / (p.theta_max - p.theta_min)


def entry_length_penalty(new_tokens: float, expert_tokens: float, p: PenaltyParams = PenaltyParams()) -> float:
    """Penalty on entry output length relative to an expert reference length."""
    if expert_tokens <= 0:
        logger.warning("expert reference has %s tokens; entry length penalty set to 0", expert_tokens)
        return 0.0
    ratio = new_tokens / expert_tokens
    if abs(new_tokens - expert_tokens) < p.delta_min or p.gamma_l <= ratio <= p.gamma_u:
        return 0.0
    if p.gamma_u < ratio <= p.gamma_max:
        return (ratio - p.gamma_u) / (p.gamma_max - p.gamma_u)
    if p.gamma_min <= ratio < p.gamma_l:
        return (p.gamma_l - ratio) / (p.gamma_l - p.gamma_min)
    return 1.0


def aggregate_ell(penalties: Mapping[str, float], mode: str = "mean") -> float:
    """Collapse the four per-type penalties into one scalar (``mean`` or ``max``)."""
    values = [float(penalties.get(k, 0.0)) for k in PENALTY_KEYS]
    if mode == "mean":
        return sum(values) / len(values)
    if mode == "max":
        return max(values)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def task_reward(judge_verdicts: Sequence[bool]) -> float:
    if not judge_verdicts:
        raise EmptyQuestionSet("task reward needs at least one judged question")
    return sum(bool(v) for v in judge_verdicts) / len(judge_verdicts)


def combine_reward(valid: bool, r_task: float, ell: float, lam: float = 0.8) -> float:
    if not valid:
        return 0.0
    return r_task * (1.0 - lam * ell)


def length_penalties(
    core_delta: float,
    new_tokens: Mapping[str, float],
    expert_tokens: Mapping[str, float] | None,
    p: PenaltyParams = PenaltyParams(),
) -> dict[str, float]:
    """Per-type penalties.  Without an expert reference, entry penalties are 0."""
    out = {CORE: core_length_penalty(core_delta, p)}
    if expert_tokens is None:
        logger.warning("no expert reference lengths; entry length penalties set to 0")
    for mem_type in ENTRY_TYPES:
        if expert_tokens is None or mem_type not in expert_tokens:
            out[mem_type] = 0.0
        else:
            out[mem_type] = entry_length_penalty(new_tokens.get(mem_type, 0), expert_tokens[mem_type], p)
    return out


@dataclass
class RewardRecord:
    valid: bool
    r_task: float
    penalties: dict[str, float]
    ell_aggregate: float
    reward: float
    retrieval_counts: dict[str, int]
    type_valid: dict[str, bool] = field(default_factory=dict)
    verdicts: list[bool] = field(default_factory=list)

    def reward_for(self, mem_type: str, gate_mode: str = "rollout", lam: float = 0.8) -> float:
        """Reward seen by one memory type.

        ``rollout`` gates on the conjunction of all four agents; ``per_type``
        gates each type on its own validity.
        """
        if gate_mode == "rollout":
            return self.reward
        if gate_mode == "per_type":
            return combine_reward(self.type_valid.get(mem_type, self.valid), self.r_task, self.ell_aggregate, lam)
        raise ValueError(f"unknown gate mode {gate_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def make_record(
    valid: bool,
    verdicts: Sequence[bool],
    penalties: Mapping[str, float],
    retrieval_counts: Mapping[str, int],
    params: PenaltyParams = PenaltyParams(),
    *,
    type_valid: Mapping[str, bool] | None = None,
    ell_mode: str = "mean",
    r_task: float | None = None,
) -> RewardRecord:
    r = task_reward(verdicts) if r_task is None else r_task
    ell = aggregate_ell(penalties, ell_mode)
    return RewardRecord(
        valid=bool(valid),
        r_task=r,
        penalties={k: float(penalties.get(k, 0.0)) for k in PENALTY_KEYS},
        ell_aggregate=ell,
        reward=combine_reward(valid, r, ell, params.lam),
        retrieval_counts={k: int(retrieval_counts.get(k, 0)) for k in ENTRY_TYPES},
        type_valid=dict(type_valid or {}),
        verdicts=[bool(v) for v in verdicts],
    )


def evaluate_rollout(
    candidate_bank,
    qa_pairs: Sequence[tuple[str, str]],
    answer_gw,
    judge_gw,
    store,
    k_answer: int = 10,
    *,
    embed_fn=None,
    valid: bool = True,
    penalties: Mapping[str, float] | None = None,
    params: PenaltyParams = PenaltyParams(),
    type_valid: Mapping[str, bool] | None = None,
    ell_mode: str = "mean",
    prompts=None,
) -> RewardRecord:
    """Answer every question from ``candidate_bank``, judge it, and build the record.

    Retrieval counts are summed over all questions.  Gateway errors are
    re-raised with the question index attached.
    """
    from .qa import answer_question, judge_answer

    if not qa_pairs:
        raise EmptyQuestionSet("no synthetic questions for this rollout")
    embed_fn = embed_fn or answer_gw
    counts = dict.fromkeys(ENTRY_TYPES, 0)
    verdicts = []
    for j, (question, gold) in enumerate(qa_pairs):
        try:
            reply, trace = answer_question(question, candidate_bank, store, answer_gw, embed_fn, k_answer, prompts)
            verdicts.append(judge_answer(question, gold, reply, judge_gw, prompts))
        except GatewayError as exc:
            exc.question_index = j
            exc.args = (f"question {j}: {exc}",)
            raise
        for mem_type, n in trace.type_counts().items():
            counts[mem_type] += n
    return make_record(
        valid,
        verdicts,
        penalties or dict.fromkeys(PENALTY_KEYS, 0.0),
        counts,
        params,
        type_valid=type_valid,
        ell_mode=ell_mode,
    )

