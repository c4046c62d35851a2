"""Command-line entry point: ``memweave <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .adrpo import attribution_env, bandit_env, train_toy
from .config import Gateways, RunConfig
from .errors import MemweaveError
from .ingest import FORMATS, load_dialogues, read_dialogues, write_dialogues

logger = logging.getLogger("memweave")

DIALOGUES_FILE = "dialogues.jsonl"


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.work_dir is not None:
        cfg = dataclasses.replace(cfg, work_dir=args.work_dir)
    if args.mock:
        cfg = cfg.with_mock()
    return cfg


def _gateways(cfg: RunConfig) -> Gateways:
    return Gateways.from_config(cfg)


def _dialogues(cfg: RunConfig, args):
    path = Path(args.dialogues) if getattr(args, "dialogues", None) else cfg.work_path / DIALOGUES_FILE
    if not path.exists():
        raise MemweaveError(f"{path} not found; run `memweave ingest` first")
    return read_dialogues(path)


def cmd_ingest(args, cfg):
    result = load_dialogues(args.path, args.format)
    cfg.work_path.mkdir(parents=True, exist_ok=True)
    out = cfg.work_path / DIALOGUES_FILE
    write_dialogues(result.dialogues, out)
    print(f"ingested {len(result.dialogues)} dialogues ({len(result.skipped)} skipped) -> {out}")


def cmd_build(args, cfg):
    gws = _gateways(cfg)
    results = []
    for d in _dialogues(cfg, args):
        r = pipeline.build_memory(d, cfg, gws, stop_after=args.stop_after, resume=not args.fresh)
        results.append(r)
        print(f"{d.dialogue_id}: {len(r.banks) - 1}/{len(d.sessions)} sessions, digest {pipeline.bank_digest(r.final)[:16]}")
    pipeline.write_expert_lengths(results, cfg.work_path / "expert_lengths.json")


def cmd_gen_qa(args, cfg):
    gws = _gateways(cfg)
    sets = {d.dialogue_id: pipeline.generate_session_qa(d, cfg, gws) for d in _dialogues(cfg, args)}
    pipeline.write_qa(sets, cfg.work_path / "qa.jsonl")
    n = sum(len(p) for s in sets.values() for p in s.values())
    print(f"wrote {n} QA pairs -> {cfg.work_path / 'qa.jsonl'}")


def cmd_rollout_reward(args, cfg):
    gws = _gateways(cfg)
    qa = pipeline.read_qa(cfg.work_path / "qa.jsonl")
    expert = pipeline.load_expert_lengths(cfg.expert_lengths or cfg.work_path / "expert_lengths.json")
    rows = []
    for d in _dialogues(cfg, args):
        for i in sorted(qa.get(d.dialogue_id, {})):
            if args.session is not None and i != args.session:
                continue
            outcomes = pipeline.rollout_and_reward(d, i, qa[d.dialogue_id][i], cfg, gws, expert=expert)
            rows.append((d.dialogue_id, i, outcomes))
    pipeline.write_rewards(rows, cfg.work_path / "rewards.jsonl")
    print(f"scored {sum(len(o) for _, _, o in rows)} rollouts over {len(rows)} sessions")


def cmd_answer(args, cfg):
    gws = _gateways(cfg)
    bank, store = pipeline.Trajectory(cfg.work_path, args.dialogue_id).final()
    reply, trace = pipeline.answer(args.question, bank, store, cfg, gws)
    print(reply)
    if args.trace:
        print(json.dumps({"retrieved": [{"id": i, "type": t, "score": s} for i, t, s in trace.ranked]}))


def cmd_evaluate(args, cfg):
    report = pipeline.evaluate(_dialogues(cfg, args), cfg, _gateways(cfg))
    pipeline.write_report(report, cfg.work_path)
    print(report.table())


def cmd_train_toy(args, cfg):
    env = attribution_env(seed=cfg.seed) if args.env == "attribution" else bandit_env(seed=cfg.seed)
    unweighted = args.alpha == 1
    adrpo = cfg.adrpo if args.alpha is None or unweighted else dataclasses.replace(cfg.adrpo, alpha=args.alpha)
    curve = train_toy(env, adrpo, args.epochs, args.reward_density, seed=cfg.seed, unweighted=unweighted)
    out = Path(args.out) if args.out else cfg.work_path / "curves.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out)
    print(f"final mean reward {curve.final():.4f} -> {out}")


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", default=default, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="override the configured seed")
    parser.add_argument("--mock", action="store_true", default=default or False,
                        help="use deterministic offline backends for every role")
    parser.add_argument("--work-dir", default=default, help="override the configured work directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="memweave", description="Memory construction and reward tooling.")
    _global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="normalize a dataset into the work directory")
    s.add_argument("path")
    s.add_argument("--format", choices=FORMATS, default="generic")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build", parents=[common], help="construct memory banks session by session")
    s.add_argument("--dialogues", help="normalized dialogues file (default: work dir)")
    s.add_argument("--stop-after", type=int, help="stop after this many sessions (resume later)")
    s.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("gen-qa", parents=[common], help="generate synthetic QA per session")
    s.add_argument("--dialogues")
    s.set_defaults(func=cmd_gen_qa)

    s = sub.add_parser("rollout-reward", parents=[common], help="sample rollouts and score them")
    s.add_argument("--dialogues")
    s.add_argument("--session", type=int, help="only this session index")
    s.set_defaults(func=cmd_rollout_reward)

    s = sub.add_parser("answer", parents=[common], help="answer a question from a built bank")
    s.add_argument("dialogue_id")
    s.add_argument("question")
    s.add_argument("--trace", action="store_true", help="also print the retrieval trace as JSON")
    s.set_defaults(func=cmd_answer)

    s = sub.add_parser("evaluate", parents=[common], help="judge benchmark questions against final banks")
    s.add_argument("--dialogues")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("train-toy", parents=[common], help="run the toy trainer and write a learning curve")
    s.add_argument("--env", choices=("bandit", "attribution"), default="bandit")
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--reward-density", type=float, default=1.0)
    s.add_argument("--alpha", type=float, help="dominant-type weight; 1 trains unweighted")
    s.add_argument("--out", help="CSV path (default: <work-dir>/curves.csv)")
    s.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (MemweaveError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
