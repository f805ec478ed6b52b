"""Command-line entry point.

    python -m src.main validate [--filter NAME]
    python -m src.main bench {sdd,dsd,dds,dmoe} (--density D | --preset NAME) [--block-size 32,64]
    python -m src.main stats [--distribution uniform|zipf:A|onehot] [--capacity-factor 1,1.5,2]
    python -m src.main train [--config config/toy_train.json] [--mode dropless|capacity:CF]

Exit codes: 0 ok, 1 validation failure, 2 training diverged, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from typing import NoReturn, Optional, Sequence

from dotenv import load_dotenv

from src import bench, routing_stats, validation
from src.bench import UsageError
from src.dense.ops import ShapeError
from src.logging_config import configure_logging, new_run_id
from src.moe.config import ConfigError
from src.run_config import DEFAULT_TRAIN_CONFIG, load_train_config
from src.sparse.topology import TopologyError
from src.training.loop import TrainingDiverged, parse_mode, train_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION_FAILED = 1
EXIT_DIVERGED = 2
EXIT_USAGE = 64

TRAIN_CSV_HEADER = ("step", "loss", "aux_loss", "drop_fraction", "max_expert_load")
DEFAULT_TRAIN_STEPS = 300


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; route that to UsageError instead."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        results = validation.run_validation(
            filter=args.filter, fault=args.inject_fault, cases=args.cases
        )
    except KeyError as e:
        raise UsageError(e.args[0]) from None

    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.name} cases={r.cases} max_error={r.max_error:.3e}"
        if not r.passed:
            line += f" seed={r.failing_seed} ({r.message})"
        print(line)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("Validation failed: %s", ", ".join(failed))
        return EXIT_VALIDATION_FAILED
    logger.info("Validation passed: %d suites", len(results))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    problems = bench.build_problems(
        args.kind,
        bench.parse_block_sizes(args.block_size),
        m=args.m,
        k=args.k,
        n=args.n,
        density=args.density,
        preset=args.preset,
        num_tokens=args.tokens,
        seed=args.seed,
        workers=args.workers,
    )
    rows = bench.run_bench(problems, reps=args.reps)
    bench.write_rows(rows, args.out or sys.stdout)
    if args.out:
        logger.info("Benchmark rows written: path=%s rows=%d", args.out, len(rows))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    distribution = routing_stats.parse_distribution(args.distribution)
    results = routing_stats.routing_stats(
        num_experts=args.num_experts,
        num_tokens=args.tokens,
        capacity_factors=routing_stats.parse_capacity_factors(args.capacity_factor),
        distribution=distribution,
        seed=args.seed,
        samples=args.samples,
        block_size=args.block_size,
    )
    print(routing_stats.format_report(results, args.num_experts, args.tokens, distribution))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    model, task, settings = load_train_config(args.config)
    if args.seed is not None:
        task = replace(task, seed=args.seed)
    capacity_factor = parse_mode(args.mode) if args.mode else model.capacity_factor
    if args.steps < 0:
        raise UsageError(f"--steps must be >= 0, got {args.steps}")

    history = train_loop(
        model, task, args.steps, capacity_factor=capacity_factor, settings=settings, workers=args.workers
    )

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(TRAIN_CSV_HEADER)
        for m in history:
            writer.writerow([m.step, m.loss, m.aux_loss, m.drop_fraction, m.max_expert_load])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmoe", description="Dropless mixture-of-experts reference tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="Run oracle and gradient suites")
    p.add_argument("--filter", help="Only run suites whose name contains this text")
    p.add_argument("--cases", type=int, help="Cases per suite (default: each suite's own)")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="Time kernels or the six dMoE products")
    p.add_argument("kind", choices=bench.BENCH_KINDS)
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--block-size", default="32,64,128", help="Comma-separated block sizes")
    p.add_argument("--density", type=float, help="Fraction of nonzero blocks in the sparse operand")
    p.add_argument("--preset", help="Model preset: xs, small or medium")
    p.add_argument("--tokens", type=int, default=1024, help="Tokens routed for preset topologies")
    p.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="Token-drop statistics per capacity factor")
    p.add_argument("--num-experts", type=int, default=64)
    p.add_argument("--tokens", type=int, default=1024)
    p.add_argument("--capacity-factor", default="1,1.5,2", help="Comma-separated factors")
    p.add_argument("--distribution", default="uniform", help="uniform, zipf:<a> or onehot")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=routing_stats.DEFAULT_SAMPLES)
    p.add_argument("--block-size", type=int, default=128)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="Train the MoE layer on the synthetic task")
    p.add_argument("--config", default=str(DEFAULT_TRAIN_CONFIG))
    p.add_argument("--mode", help="dropless or capacity:<factor> (default: from config)")
    p.add_argument("--steps", type=int, default=DEFAULT_TRAIN_STEPS)
    p.add_argument("--seed", type=int, help="Override the task seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="Metrics CSV path (default stdout)")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        run_id = new_run_id()
        logger.debug("Command %s started: run_id=%s", args.command, run_id)
        return args.func(args)
    except TrainingDiverged as e:
        logger.error("%s", e)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, ShapeError, TopologyError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
