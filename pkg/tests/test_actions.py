import datetime as dt
import json
import random
import string

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memweave.actions import (
    RawEntryOp,
    core_op_to_json,
    entry_ops_to_json,
    extract_json_object,
    parse_core,
    parse_entry_ops,
    resolve_references,
    validate_rollout,
)
from memweave.errors import (
    ActionError,
    IllegalActionForType,
    InvalidField,
    MalformedJson,
    MissingField,
    ResolutionFailure,
    UnknownAction,
)
from memweave.gateway import hash_embed
from memweave.memory import CoreOp, EntryOp, MemoryBank, apply_entry_ops


def embed(texts):
    return np.vstack([hash_embed(t, 64) for t in texts])


def _bank():
    bank = MemoryBank.empty().with_core_text("Name: Ana\nJob: nurse")
    bank = apply_entry_ops(
        bank,
        "episodic",
        [EntryOp("Add", "2024-01-02: moved to Lima"), EntryOp("Add", "2024-02-10: started a new job at the clinic")],
        dt.date(2024, 2, 10),
    )
    return apply_entry_ops(bank, "semantic", [EntryOp("Add", "favorite food is ceviche")], dt.date(2024, 2, 10))


# -- core ----------------------------------------------------------------------


def test_parse_core_forms():
    assert parse_core('{"operation": "APPEND", "content": "x"}') == CoreOp("Append", content="x")
    assert parse_core('{"operation":"REPLACE","old_text":"a","new_text":""}') == CoreOp("Replace", old_text="a")
    assert parse_core('Sure!\n```json\n{"operation": "REWRITE", "content": "y"}\n```') == CoreOp("Rewrite", content="y")


@pytest.mark.parametrize(
    "raw,err",
    [
        ("not json", MalformedJson),
        ('{"operation": "DELETE", "content": "x"}', UnknownAction),
        ('{"operation": "append", "content": "x"}', UnknownAction),
        ('{"content": "x"}', MissingField),
        ('{"operation": "REPLACE", "new_text": "x"}', MissingField),
        ('{"operation": "APPEND", "content": 5}', InvalidField),
        ('{"operation": "APPEND", "content": ""}', MissingField),
    ],
)
def test_parse_core_errors(raw, err):
    with pytest.raises(err) as info:
        parse_core(raw)
    assert info.value.diagnostic().startswith(info.value.kind)


@pytest.mark.parametrize("op", [CoreOp("Append", content="a b"), CoreOp("Replace", old_text="x", new_text="y"), CoreOp("Rewrite", content="z")])
def test_core_roundtrip(op):
    assert parse_core(core_op_to_json(op)) == op


# -- entries -------------------------------------------------------------------


def test_parse_entry_ops_all_kinds():
    raw = json.dumps(
        {
            "operations": [
                {"action": "ADD", "memory": "a"},
                {"action": "UPDATE", "old_memory": "a", "memory": "b"},
                {"action": "MERGE", "old_memories": ["a", "b"], "memory": "c"},
            ]
        }
    )
    ops = parse_entry_ops(raw, "episodic")
    assert [o.kind for o in ops] == ["Add", "Update", "Merge"]
    assert ops[2].old_memories == ("a", "b")


def test_update_accepts_new_memory_alias():
    (op,) = parse_entry_ops('{"operations": [{"action": "UPDATE", "old_memory": "a", "new_memory": "b"}]}', "semantic")
    assert op.memory == "b"


def test_empty_operation_list_is_valid():
    assert parse_entry_ops('{"operations": []}', "procedural") == []


@pytest.mark.parametrize(
    "raw,mem_type,err",
    [
        ('{"operations": [{"action": "SKIP", "reason": "x"}]}', "episodic", IllegalActionForType),
        ('{"operations": [{"action": "MERGE", "old_memories": ["a","b"], "memory": "c"}]}', "semantic", IllegalActionForType),
        ('{"operations": [{"action": "SKIP"}]}', "procedural", IllegalActionForType),
        ('{"operations": [{"action": "MERGE", "old_memories": ["a"], "memory": "c"}]}', "episodic", InvalidField),
        ('{"operations": [{"action": "UPDATE", "memory": "c"}]}', "episodic", MissingField),
        ('{"operations": [{"action": "FORGET", "memory": "c"}]}', "episodic", UnknownAction),
        ('{"operations": {"action": "ADD"}}', "episodic", InvalidField),
        ('{"ops": []}', "episodic", MissingField),
    ],
)
def test_entry_errors(raw, mem_type, err):
    with pytest.raises(err):
        parse_entry_ops(raw, mem_type)


def test_entry_roundtrip():
    ops = [RawEntryOp("Add", memory="a"), RawEntryOp("Update", memory="b", old_memory="a"), RawEntryOp("Skip", reason="r")]
    assert parse_entry_ops(entry_ops_to_json(ops), "semantic") == ops


def test_extract_picks_first_object_after_prose():
    assert extract_json_object('I think [1, 2] then {"a": {"b": 1}} and {"c": 2}') == {"a": {"b": 1}}


# -- resolution ----------------------------------------------------------------


def test_exact_match_resolution():
    bank = _bank()
    ops = resolve_references([RawEntryOp("Update", memory="x", old_memory="2024-01-02: moved to Lima")], bank.episodic, embed)
    assert ops[0].target_refs == (1,)


def test_exact_match_prefers_newest_duplicate():
    bank = apply_entry_ops(MemoryBank.empty(), "semantic", [EntryOp("Add", "same"), EntryOp("Add", "same")], "2024-01-01")
    ops = resolve_references([RawEntryOp("Update", memory="x", old_memory="same")], bank.semantic, embed)
    assert ops[0].target_refs == (2,)


def test_near_match_above_threshold():
    bank = _bank()
    quoted = "2024-01-02: Moved to Lima!"  # same words, different case and punctuation
    ops = resolve_references([RawEntryOp("Update", memory="x", old_memory=quoted)], bank.episodic, embed)
    assert ops[0].target_refs == (1,)


def test_unrelated_text_fails_resolution():
    with pytest.raises(ResolutionFailure):
        resolve_references([RawEntryOp("Update", memory="x", old_memory="bought a sailboat")], _bank().episodic, embed)


def test_merge_collapsing_to_one_target_fails():
    bank = _bank()
    t = bank.episodic[0].content
    with pytest.raises(ResolutionFailure):
        resolve_references([RawEntryOp("Merge", memory="m", old_memories=(t, t))], bank.episodic, embed)


def test_validate_rollout_collects_per_type():
    bank = _bank()
    report = validate_rollout(
        '{"operation": "REPLACE", "old_text": "Job: teacher", "new_text": "x"}',
        '{"operations": [{"action": "ADD", "memory": "2024-03-01: trip"}]}',
        '{"operations": [{"action": "UPDATE", "old_memory": "no such fact anywhere", "memory": "x"}]}',
        "garbage",
        bank,
        embed,
    )
    assert report.type_flags() == {"core": False, "episodic": True, "semantic": False, "procedural": False}
    assert not report.valid
    assert report.diagnostics()["procedural"][0].startswith("malformed_json")
    assert report.per_type["episodic"].entry_ops[0].kind == "Add"


def test_validate_rollout_all_valid():
    bank = _bank()
    report = validate_rollout(
        '{"operation": "REPLACE", "old_text": "Job: nurse", "new_text": "Job: head nurse"}',
        '{"operations": []}',
        '{"operations": [{"action": "SKIP", "reason": "nothing new"}]}',
        '{"operations": []}',
        bank,
        embed,
    )
    assert report.valid


# -- fuzz ----------------------------------------------------------------------

_FRAGMENTS = ['{', '}', '[', ']', '"operation"', '"operations"', '"action"', ':', ',', '"ADD"', '"APPEND"',
              '"memory"', '"content"', 'null', '1e999', '"\\u0000"', '```', 'json', '"MERGE"', '"old_memories"']


def _fuzz_string(rng: random.Random) -> str:
    mode = rng.random()
    if mode < 0.3:
        return "".join(rng.choice(string.printable) for _ in range(rng.randint(0, 80)))
    if mode < 0.8:
        return "".join(rng.choice(_FRAGMENTS) for _ in range(rng.randint(0, 25)))
    return "{" * rng.randint(0, 5000)


def test_fuzz_parsers_never_crash():
    rng = random.Random(1234)
    for _ in range(10_000):
        raw = _fuzz_string(rng)
        for parse in (parse_core, lambda r: parse_entry_ops(r, "episodic"), lambda r: parse_entry_ops(r, "semantic")):
            try:
                parse(raw)
            except ActionError:
                pass


@settings(max_examples=300, deadline=None)
@given(st.recursive(st.none() | st.booleans() | st.integers() | st.text(max_size=8),
                    lambda c: st.lists(c, max_size=4) | st.dictionaries(st.sampled_from(["action", "memory", "operations", "old_memory", "old_memories", "reason", "x"]), c, max_size=4),
                    max_leaves=20))
def test_structured_fuzz_only_raises_action_errors(value):
    raw = json.dumps({"operations": value} if not isinstance(value, dict) else value)
    try:
        parse_entry_ops(raw, "episodic")
    except ActionError:
        pass
