"""Command-line entry point: ``platoonrl {train,summarize,evaluate,render,audit}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import noisy_net as nn
from .experiment import (
    ExperimentConfig,
    audit_traces,
    evaluate_checkpoint,
    summarize,
    write_summary,
    run_experiment,
)
from .highway_env import EnvConfig
from .marl_trainer import Algo, TrainerConfig
from .render import render_trace

log = logging.getLogger("platoonrl")


def _train(args) -> int:
    doc = {}
    if args.config:
        doc = ExperimentConfig.load(args.config).to_dict()
    overrides = {
        "densities": args.density,
        "algos": args.algo,
        "seeds": args.seed,
        "episodes": args.episodes,
        "out": args.out,
        "workers": args.workers,
        "trace_every": args.trace_every,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    config = ExperimentConfig.from_dict(doc)
    log.info("running %d runs into %s", len(config.runs()), config.out)
    manifest = run_experiment(config)
    for run in manifest["runs"]:
        status = run["status"] if run["status"] == "ok" else f"FAILED ({run['error']})"
        print(f"density={run['density']} seed={run['seed']} algo={run['algo']}: {status}")
    if manifest["failed"] == 0:
        csvs = [Path(config.out) / f["path"] for r in manifest["runs"] for f in r["files"] if f["path"].endswith("run.csv")]
        try:
            summary = summarize(csvs)
        except ValueError as exc:
            log.info("no summary written: %s", exc)
        else:
            write_summary(summary, config.out)
            print(summary.to_text(), end="")
    return 1 if manifest["failed"] else 0


def _summarize(args) -> int:
    paths = []
    for p in args.paths:
        p = Path(p)
        paths += sorted(p.rglob("run.csv")) if p.is_dir() else [p]
    summary = summarize(paths)
    if args.out:
        write_summary(summary, args.out)
    print(summary.to_text(), end="")
    return 0


def _evaluate(args) -> int:
    env_cfg = EnvConfig(density_level=args.density)
    expected = TrainerConfig(algo=args.algo).build_network(np.random.default_rng(0)) if args.algo else None
    metrics = evaluate_checkpoint(args.checkpoint, env_cfg, args.episodes, args.seed, expected)
    print(json.dumps(metrics.to_dict(), indent=2))
    return 0


def _render(args) -> int:
    written = render_trace(args.trace, args.out)
    for p in written:
        print(p)
    return 0


def _audit(args) -> int:
    paths = []
    for p in args.paths:
        p = Path(p)
        paths += sorted(p.rglob("trace.jsonl")) if p.is_dir() else [p]
    report = audit_traces(paths)
    print(f"audited {len(paths)} trace(s): {report.collision_steps} collision steps, {len(report.violations)} violations")
    for v in report.violations:
        print(json.dumps(v))
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoonrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run or the density x seed x algo grid")
    p.add_argument("--density", type=int, choices=(1, 2, 3), action="append")
    p.add_argument("--algo", choices=[a.value for a in Algo], action="append")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--episodes", type=int)
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--trace-every", type=int, help="log traces every N episodes (0 disables)")
    p.set_defaults(func=_train)

    p = sub.add_parser("summarize", help="binned reward table from run CSVs")
    p.add_argument("paths", nargs="+", help="run CSVs or directories searched for run.csv")
    p.add_argument("--out", help="directory for summary.csv and summary.txt")
    p.set_defaults(func=_summarize)

    p = sub.add_parser("evaluate", help="greedy noise-free rollouts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--density", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--algo", choices=[a.value for a in Algo], help="check the checkpoint against this architecture")
    p.set_defaults(func=_evaluate)

    p = sub.add_parser("render", help="SVG x-t schematic per episode of a trace")
    p.add_argument("trace")
    p.add_argument("--out", default="render")
    p.set_defaults(func=_render)

    p = sub.add_parser("audit", help="check collision steps in traces carry the collision penalty")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, nn.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
