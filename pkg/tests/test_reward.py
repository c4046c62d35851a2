import logging

import pytest
from hypothesis import given, settings, strategies as st

from memweave.config import Gateways
from memweave.errors import EmptyQuestionSet, GatewayError
from memweave.gateway import Gateway
from memweave.memory import EntryOp, MemoryBank, apply_entry_ops
from memweave.reward import (
    PenaltyParams,
    aggregate_ell,
    combine_reward,
    core_length_penalty,
    entry_length_penalty,
    evaluate_rollout,
    length_penalties,
    make_record,
    task_reward,
)
from memweave.store import VectorStore

import oracles


@pytest.mark.parametrize("delta,expected", [(-50, 0.0), (0, 0.0), (150, 0.0), (275, 0.5), (400, 1.0), (1000, 1.0)])
def test_core_penalty_points(delta, expected):
    assert core_length_penalty(delta) == expected


@pytest.mark.parametrize(
    "new,expert,expected",
    [
        (250, 100, 0.0),      # |Δ| < 200
        (650, 500, 0.0),      # ρ = 1.3 inside band
        (300, 600, 0.0),      # ρ = 0.5 inside band
        (3000, 1000, 1.0),    # ρ = γ_max
        (100, 1000, 1.0),     # ρ = γ_min
        (2150, 1000, 0.5),    # halfway up the upper ramp
        (300, 1000, 0.5),     # halfway down the lower ramp
        (5000, 1000, 1.0),
    ],
)
def test_entry_penalty_points(new, expert, expected):
    assert entry_length_penalty(new, expert) == pytest.approx(expected, abs=1e-12)


def test_entry_penalty_without_expert_is_zero(caplog):
    with caplog.at_level(logging.WARNING):
        assert entry_length_penalty(900, 0) == 0.0
    assert "expert" in caplog.text


@settings(max_examples=500, deadline=None)
@given(st.floats(1, 5000), st.floats(1, 5000))
def test_entry_penalty_matches_oracle(new, expert):
    assert entry_length_penalty(new, expert) == pytest.approx(oracles.penalty_entry(new, expert), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 5000))
def test_identical_lengths_never_penalized(x):
    assert entry_length_penalty(x, x) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-1000, 2000), st.floats(-1000, 2000))
def test_core_penalty_monotone(a, b):
    lo, hi = sorted((a, b))
    assert core_length_penalty(lo) <= core_length_penalty(hi)


def test_params_validation():
    with pytest.raises(ValueError):
        PenaltyParams(theta_min=400, theta_max=150)
    with pytest.raises(ValueError):
        PenaltyParams(gamma_l=1.4)
    with pytest.raises(ValueError):
        PenaltyParams(lam=1.5)
    assert PenaltyParams.from_dict({"lambda": 0.5}).lam == 0.5


def test_aggregate_modes():
    pens = {"core": 1.0, "episodic": 0.5, "semantic": 0.0, "procedural": 0.5}
    assert aggregate_ell(pens) == 0.5
    assert aggregate_ell(pens, "max") == 1.0
    with pytest.raises(ValueError):
        aggregate_ell(pens, "median")


def test_task_reward():
    assert task_reward([True, False, True, True, False]) == 0.6
    with pytest.raises(EmptyQuestionSet):
        task_reward([])


@settings(max_examples=300, deadline=None)
@given(st.booleans(), st.floats(0, 1), st.floats(0, 1))
def test_combine_reward_bounds(valid, r, ell):
    out = combine_reward(valid, r, ell)
    assert 0.0 <= out <= 1.0
    if not valid:
        assert out == 0.0


def test_length_penalties_without_reference():
    out = length_penalties(275, {"episodic": 900}, None)
    assert out == {"core": 0.5, "episodic": 0.0, "semantic": 0.0, "procedural": 0.0}


def test_record_per_type_gate():
    rec = make_record(False, [True, True], {}, {}, type_valid={"core": True, "episodic": False})
    assert rec.reward == 0.0
    assert rec.reward_for("episodic") == 0.0
    assert rec.reward_for("core", "per_type") == 1.0
    assert rec.reward_for("episodic", "per_type") == 0.0


def _small_bank():
    bank = MemoryBank.empty().with_core_text("Name: Ana")
    bank = apply_entry_ops(bank, "episodic", [EntryOp("Add", "2024-01-02: Ana adopted a cat named Miso")], "2024-01-02")
    bank = apply_entry_ops(bank, "semantic", [EntryOp("Add", "Ana is allergic to peanuts")], "2024-01-02")
    gw = Gateway.mock()
    return bank, VectorStore().upsert(bank.entries(), gw.embed), gw


def test_evaluate_rollout_scripted_judge():
    bank, store, embed_gw = _small_bank()
    answer = Gateway.scripted({"answer": ["Miso", "peanuts", "no idea"]})
    judge = Gateway.scripted({"judge": ["CORRECT", "CORRECT", "maybe"]})
    qa = [("cat name?", "Miso"), ("allergy?", "peanuts"), ("car?", "Volvo")]
    rec = evaluate_rollout(bank, qa, answer, judge, store, 10, embed_fn=embed_gw.embed)
    assert rec.r_task == pytest.approx(2 / 3)
    assert rec.verdicts == [True, True, False]
    assert rec.retrieval_counts == {"episodic": 3, "semantic": 3, "procedural": 0}


def test_evaluate_rollout_attaches_question_index():
    bank, store, embed_gw = _small_bank()
    answer = Gateway.scripted({"answer": ["a"]})
    judge = Gateway.scripted({"judge": ["CORRECT"]})
    with pytest.raises(GatewayError) as info:
        evaluate_rollout(bank, [("q1", "a"), ("q2", "b")], answer, judge, store, embed_fn=embed_gw.embed)
    assert info.value.question_index == 1
    assert "question 1" in str(info.value)


def test_evaluate_rollout_needs_questions():
    bank, store, gw = _small_bank()
    with pytest.raises(EmptyQuestionSet):
        evaluate_rollout(bank, [], gw, gw, store, embed_fn=gw.embed)


def test_counts_match_answer_trace():
    from memweave.qa import answer_question

    bank, store, gw = _small_bank()
    gws = Gateways.mock()
    questions = [("What is the cat called?", "Miso"), ("What is Ana allergic to?", "peanuts")]
    rec = evaluate_rollout(bank, questions, gws.answer, gws.judge, store, 1, embed_fn=gw.embed)
    expected = {"episodic": 0, "semantic": 0, "procedural": 0}
    for q, _ in questions:
        _, trace = answer_question(q, bank, store, gws.answer, gw.embed, 1)
        for m, n in trace.type_counts().items():
            expected[m] += n
    assert rec.retrieval_counts == expected
    assert rec.r_task == 1.0
