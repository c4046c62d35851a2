import csv
import json

import pytest

from memweave.cli import main


@pytest.fixture
def work(tmp_path, fixtures):
    wd = tmp_path / "work"
    assert main(["ingest", str(fixtures / "generic_3.json"), "--mock", "--work-dir", str(wd)]) == 0
    return wd


def run(wd, *args):
    return main([*args, "--mock", "--work-dir", str(wd)])


def test_full_flow(work, capsys):
    assert (work / "dialogues.jsonl").exists()
    assert run(work, "build") == 0
    assert (work / "expert_lengths.json").exists()
    assert run(work, "gen-qa") == 0
    assert (work / "qa.jsonl").exists()
    assert run(work, "rollout-reward") == 0
    rows = [json.loads(x) for x in (work / "rewards.jsonl").read_text().splitlines()]
    assert rows and all(0.0 <= r["reward"] <= 1.0 for r in rows)
    assert run(work, "evaluate") == 0
    assert (work / "report.csv").read_text().splitlines()[0] == "category,correct,total,accuracy"
    capsys.readouterr()
    assert run(work, "answer", "alice", "What is the dog called?", "--trace") == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert "retrieved" in json.loads(out[-1])


def test_global_flags_before_subcommand(work):
    assert main(["--mock", "--work-dir", str(work), "build", "--stop-after", "1"]) == 0
    manifest = json.loads((work / "banks" / "alice" / "manifest.json").read_text())
    assert manifest["completed"] == 1


def test_rollout_single_session(work):
    run(work, "build")
    run(work, "gen-qa")
    assert run(work, "rollout-reward", "--session", "0") == 0
    rows = [json.loads(x) for x in (work / "rewards.jsonl").read_text().splitlines()]
    assert {r["session_index"] for r in rows} == {0}


def test_missing_inputs_report_error(tmp_path, capsys):
    assert run(tmp_path / "empty", "build") == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_dialogue(work, capsys):
    run(work, "build")
    assert run(work, "answer", "nobody", "q?") == 1
    assert "nobody" in capsys.readouterr().err


@pytest.mark.parametrize("env", ["bandit", "attribution"])
def test_train_toy_writes_curve(tmp_path, env):
    out = tmp_path / "c.csv"
    assert main(["train-toy", "--env", env, "--epochs", "5", "--out", str(out), "--work-dir", str(tmp_path)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 5
    assert [int(r["epoch"]) for r in rows] == list(range(1, 6))
