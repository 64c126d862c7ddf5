"""Command-line surface: bootstrap, train-sl, train-rl, simulate, chat,
compare, and report."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .checkpoint import load_policy, save_policy
from .config import RunConfig, derive_seed
from .evaluator import CallableJudge, HttpJudgeClient
from .orchestrator import (
    Environment,
    Orchestrator,
    PolicyRunner,
    bootstrap_corpus,
    compare_policies,
    simulate,
)
from .seqformat import save_corpus, tokenize
from .policy import GenerationConfig


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config.validate()


def cmd_bootstrap(args) -> int:
    config = _load_config(args)
    env = Environment.from_config(config, zero_noise=True)
    records, _ = bootstrap_corpus(
        env.ontology, env.db, args.dialogues, derive_seed(config.seed, "bootstrap"),
        env_config=config.env,
    )
    save_corpus(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train_sl(args) -> int:
    config = _load_config(args)
    config.rl.dialogues = 0
    orch = Orchestrator(config, args.out)
    corpus, _ = orch.phase_bootstrap()
    _, result = orch.phase_sl(corpus)
    print(
        f"final loss {result.step_losses[-1]:.4f} "
        f"holdout perplexity {result.holdout_perplexity[-1]:.4f}"
    )
    print(f"checkpoint at {Path(args.out) / 'policy-sl'}")
    return 0


def cmd_train_rl(args) -> int:
    config = _load_config(args)
    if args.reward:
        config.rl.reward = args.reward
    if args.dialogues:
        config.rl.dialogues = args.dialogues
    orch = Orchestrator(config, args.out)
    result = orch.train_full()
    print(f"phases: {', '.join(result.phases)}")
    print(f"artifacts under {result.checkpoint_dir}")
    return 0


def cmd_simulate(args) -> int:
    policy, config, _ = load_policy(args.checkpoint)
    if args.seed is not None:
        config.seed = args.seed
    env = Environment.from_config(config)
    policy.ontology = env.ontology
    logs, metrics = simulate(
        lambda: PolicyRunner(policy, env.db),
        env,
        args.dialogues,
        derive_seed(config.seed, "simulate"),
    )
    if args.logs:
        with open(args.logs, "w") as fh:
            for log in logs:
                fh.write(json.dumps(log.to_dict()) + "\n")
    print(json.dumps(metrics, indent=2))
    if args.table:
        with open(args.table, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(metrics))
            writer.writeheader()
            writer.writerow(metrics)
    return 0


def cmd_chat(args) -> int:
    policy, config, _ = load_policy(args.checkpoint)
    env = Environment.from_config(config)
    run_chat(policy, env, sys.stdin, sys.stdout, verbose=args.verbose)
    return 0


def run_chat(policy, env, stdin, stdout, verbose: bool = False) -> None:
    """Greedy REPL against the policy; 'bye' ends the session."""
    history: list[tuple[str, str]] = []
    stdout.write("you : ")
    stdout.flush()
    for line in stdin:
        text = " ".join(tokenize(line.strip().lower()))
        if not text:
            stdout.write("you : ")
            stdout.flush()
            continue
        unknown = [t for t in tokenize(text) if t not in policy.vocab]
        if unknown:
            stdout.write(f"(unknown words mapped to <unk>: {' '.join(unknown)})\n")
        history.append(("user", text))
        outcome = policy.run_turn(history, env.db, mode="greedy")
        record = outcome.record
        if verbose:
            stdout.write(f"  emotion : {record.emotion}\n")
            stdout.write(f"  domain  : {record.domain}\n")
            state = " ; ".join(f"{k}: {v}" for k, v in record.state.slots.items())
            stdout.write(f"  state   : {state}\n")
            stdout.write(f"  db      : {record.db_text}\n")
            acts = " ; ".join(" ".join(a) for a in record.actions)
            stdout.write(f"  action  : {acts}\n")
            stdout.write(f"  conduct : {record.conduct}\n")
        stdout.write(f"system : {record.response}\n")
        history.append(("system", record.response))
        if text.rstrip(" .!").endswith("bye") or text == "bye":
            break
        stdout.write("you : ")
        stdout.flush()


def cmd_compare(args) -> int:
    policy_a, config, _ = load_policy(args.checkpoint_a)
    policy_b, _, _ = load_policy(args.checkpoint_b)
    env = Environment.from_config(config)
    if args.judge == "mock":
        judge = CallableJudge(
            lambda prompt: '{"judgement": "tie", "explanation": "mock"}'
        )
    else:
        endpoint = os.environ.get("TODRL_JUDGE_ENDPOINT")
        if not endpoint:
            print("set TODRL_JUDGE_ENDPOINT (and TODRL_JUDGE_API_KEY) first",
                  file=sys.stderr)
            return 2
        judge = HttpJudgeClient(
            endpoint, args.judge, api_key=os.environ.get("TODRL_JUDGE_API_KEY")
        )
    tally = compare_policies(
        policy_a, policy_b, env, args.pairs, judge, seed=args.seed or config.seed
    )
    print(json.dumps(tally, indent=2))
    return 0


def cmd_report(args) -> int:
    """Collate metrics.jsonl rows of a run into a CSV summary."""
    rows = []
    with open(Path(args.rundir) / "metrics.jsonl") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    if not rows:
        print("no metrics found", file=sys.stderr)
        return 1
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    out = args.out or str(Path(args.rundir) / "report.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="todrl",
        description="Task-oriented dialogue training and evaluation campaigns",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bootstrap", help="generate an expert demonstration corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--dialogues", type=int, default=400)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="corpus.jsonl")
    p.set_defaults(fn=cmd_bootstrap)

    p = sub.add_parser("train-sl", help="supervised pretraining only")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/sl")
    p.set_defaults(fn=cmd_train_sl)

    p = sub.add_parser("train-rl", help="full training (Algorithm phases)")
    p.add_argument("--config", default=None)
    p.add_argument("--reward", choices=["sent", "succ", "combined"], default=None)
    p.add_argument("--dialogues", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/rl")
    p.set_defaults(fn=cmd_train_rl)

    p = sub.add_parser("simulate", help="greedy evaluation campaign")
    p.add_argument("checkpoint")
    p.add_argument("--dialogues", type=int, default=500)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--logs", default=None, help="write dialogue logs (jsonl)")
    p.add_argument("--table", default=None, help="write the metric table (csv)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("chat", help="interactive session with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--verbose", action="store_true",
                   help="print every intermediate segment")
    p.set_defaults(fn=cmd_chat)

    p = sub.add_parser("compare", help="pairwise judged comparison of two checkpoints")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--judge", default="mock",
                   help="'mock' or a judge model identifier")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("report", help="collate run metrics into a csv table")
    p.add_argument("rundir")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
