"""Kernel and dMoE-layer timing harness.

Rows are one timed problem each, written as CSV with CSV_HEADER. Topology
construction and operand setup happen before timing starts; only the kernel
call is inside the timed region. Each problem runs WARMUP_REPS untimed reps
first, and the first warmup also records the instrumented flop count used for
the gflops column.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, TextIO, Union

import numpy as np

from src.moe.config import MoEConfig, get_preset
from src.moe.permutation import make_permutation, moe_topology
from src.moe.routing import RouterAssignment
from src.sparse.kernels import collect_stats, dds, dsd, sdd
from src.sparse.matrix import BlockSparseMatrix
from src.sparse.topology import BlockTopology, topology_from_blocks

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("sdd", "dsd", "dds")
BENCH_KINDS = KERNEL_KINDS + ("dmoe",)
DEFAULT_REPS = 100
WARMUP_REPS = 3

CSV_HEADER = (
    "name",
    "m",
    "k",
    "n",
    "block_size",
    "nnz_blocks",
    "reps",
    "mean_s",
    "std_s",
    "gflops",
)


class UsageError(Exception):
    """Bad flag values or combinations; the CLI maps this to exit 64."""


@dataclass(frozen=True)
class BenchRow:
    name: str
    m: int
    k: int
    n: int
    block_size: int
    nnz_blocks: int
    reps: int
    mean_s: float
    std_s: float
    gflops: float


@dataclass(frozen=True)
class Problem:
    """One timed call: out(m x n) = op(m x k, k x n)."""

    name: str
    m: int
    k: int
    n: int
    topology: BlockTopology
    call: Callable[[], object]


def time_call(call: Callable[[], object], reps: int) -> tuple[float, float, int]:
    """(mean seconds, std seconds, flops of one call) over `reps` timed calls."""
    if reps < 1:
        raise UsageError(f"--reps must be >= 1, got {reps}")
    with collect_stats() as stats:
        call()
    for _ in range(WARMUP_REPS - 1):
        call()
    samples = np.empty(reps)
    for i in range(reps):
        start = time.perf_counter()
        call()
        samples[i] = time.perf_counter() - start
    return float(samples.mean()), float(samples.std()), stats.flops


def run_problem(problem: Problem, reps: int) -> BenchRow:
    mean_s, std_s, flops = time_call(problem.call, reps)
    row = BenchRow(
        name=problem.name,
        m=problem.m,
        k=problem.k,
        n=problem.n,
        block_size=problem.topology.block_size,
        nnz_blocks=problem.topology.nnz_blocks,
        reps=reps,
        mean_s=mean_s,
        std_s=std_s,
        gflops=flops / mean_s / 1e9 if mean_s > 0 else 0.0,
    )
    logger.info(
        "%s m=%d k=%d n=%d bs=%d nnz=%d mean=%.3gs gflops=%.3f",
        row.name,
        row.m,
        row.k,
        row.n,
        row.block_size,
        row.nnz_blocks,
        row.mean_s,
        row.gflops,
    )
    return row


# ---------- Problem construction ----------


def topology_with_blocks(
    n_block_rows: int,
    n_block_cols: int,
    block_size: int,
    nnz_blocks: int,
    rng: np.random.Generator,
) -> BlockTopology:
    """Exactly `nnz_blocks` nonzero blocks at random positions."""
    total = n_block_rows * n_block_cols
    if not 0 <= nnz_blocks <= total:
        raise UsageError(f"nnz_blocks={nnz_blocks} must be between 0 and {total}")
    picks = rng.choice(total, size=nnz_blocks, replace=False)
    coords = [(int(p) // n_block_cols, int(p) % n_block_cols) for p in picks]
    return topology_from_blocks(coords, n_block_rows, n_block_cols, block_size)


def _random_values(topology: BlockTopology, rng: np.random.Generator) -> BlockSparseMatrix:
    bs = topology.block_size
    return BlockSparseMatrix(topology, rng.standard_normal((topology.nnz_blocks, bs, bs)))


def kernel_problem(
    kind: str,
    topology: BlockTopology,
    inner: int,
    rng: np.random.Generator,
    workers: Optional[int] = None,
) -> Problem:
    """Time one kernel whose sparse operand (or output) has `topology`.

    sdd: topology is the output (m x n), inner is k.
    dsd: topology is the left operand (m x k), inner is n.
    dds: topology is the right operand (k x n), inner is m.
    """
    rows, cols = topology.shape
    if kind == "sdd":
        a = rng.standard_normal((rows, inner))
        b = rng.standard_normal((inner, cols))
        return Problem("sdd", rows, inner, cols, topology, lambda: sdd(a, b, topology, workers=workers))
    if kind == "dsd":
        s = _random_values(topology, rng)
        b = rng.standard_normal((cols, inner))
        return Problem("dsd", rows, cols, inner, topology, lambda: dsd(s, b, workers=workers))
    if kind == "dds":
        s = _random_values(topology, rng)
        a = rng.standard_normal((inner, rows))
        return Problem("dds", inner, rows, cols, topology, lambda: dds(a, s, workers=workers))
    raise UsageError(f"unknown kernel {kind!r} (expected one of {KERNEL_KINDS})")


def uniform_moe_topology(config: MoEConfig, num_tokens: int) -> BlockTopology:
    """dMoE topology for tokens routed round-robin over the experts (top-1)."""
    expert_ids = (np.arange(num_tokens) % config.num_experts).reshape(-1, 1)
    probs = np.full((num_tokens, config.num_experts), 1.0 / config.num_experts)
    assignment = RouterAssignment(expert_ids=expert_ids, gates=np.ones((num_tokens, 1)), probs=probs)
    plan = make_permutation(assignment, replace(config, top_k=1), num_tokens)
    return moe_topology(plan, config)


def dmoe_problems(
    config: MoEConfig,
    num_tokens: int,
    rng: np.random.Generator,
    workers: Optional[int] = None,
) -> list[Problem]:
    """The six products of one dMoE layer's forward and backward passes."""
    t = uniform_moe_topology(config, num_tokens)
    rows, inner = t.shape
    hidden = config.hidden_size
    x_g = rng.standard_normal((rows, hidden))
    dy_g = rng.standard_normal((rows, hidden))
    w1 = rng.standard_normal((hidden, inner))
    w2 = rng.standard_normal((inner, hidden))
    h = _random_values(t, rng)
    return [
        Problem("dmoe_sdd", rows, hidden, inner, t, lambda: sdd(x_g, w1, t, workers=workers)),
        Problem("dmoe_dsd", rows, inner, hidden, t, lambda: dsd(h, w2, workers=workers)),
        Problem(
            "dmoe_sdd_t",
            rows,
            hidden,
            inner,
            t,
            lambda: sdd(dy_g, w2, t, transpose_b=True, workers=workers),
        ),
        Problem(
            "dmoe_dstd",
            inner,
            rows,
            hidden,
            t,
            lambda: dsd(h, dy_g, transpose_s=True, workers=workers),
        ),
        Problem(
            "dmoe_dsdt",
            rows,
            inner,
            hidden,
            t,
            lambda: dsd(h, w1, transpose_b=True, workers=workers),
        ),
        Problem(
            "dmoe_ddts",
            hidden,
            rows,
            inner,
            t,
            lambda: dds(x_g, h, transpose_a=True, workers=workers),
        ),
    ]


def parse_block_sizes(text: str) -> list[int]:
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--block-size must be a comma-separated list of ints, got {text!r}") from None
    if not sizes or any(bs < 1 for bs in sizes):
        raise UsageError(f"--block-size needs positive sizes, got {text!r}")
    return sizes


def build_problems(
    kind: str,
    block_sizes: Iterable[int],
    m: int = 512,
    k: int = 512,
    n: int = 512,
    density: Optional[float] = None,
    preset: Optional[str] = None,
    num_tokens: int = 1024,
    seed: int = 0,
    workers: Optional[int] = None,
) -> list[Problem]:
    """Resolve CLI flags into the problems to time, one set per block size."""
    if kind not in BENCH_KINDS:
        raise UsageError(f"unknown bench kind {kind!r} (expected one of {BENCH_KINDS})")
    if (density is None) == (preset is None):
        raise UsageError("give exactly one of --density or --preset")
    if kind == "dmoe" and preset is None:
        raise UsageError("bench dmoe needs --preset")
    if num_tokens < 1:
        raise UsageError(f"--tokens must be >= 1, got {num_tokens}")

    rng = np.random.default_rng(seed)
    problems: list[Problem] = []
    for bs in block_sizes:
        if preset is not None:
            base = get_preset(preset)
            if base.ffn_hidden_size % bs:
                raise UsageError(
                    f"block size {bs} does not divide ffn_hidden_size={base.ffn_hidden_size}"
                )
            config = replace(base, block_size=bs)
            if kind == "dmoe":
                problems.extend(dmoe_problems(config, num_tokens, rng, workers))
                continue
            t = uniform_moe_topology(config, num_tokens)
            # sdd: (tokens x hidden)(hidden x E*ffn); dsd: (tokens x E*ffn)(E*ffn x hidden);
            # dds: (hidden x tokens)(tokens x E*ffn).
            problems.append(kernel_problem(kind, t, config.hidden_size, rng, workers))
            continue

        if not 0.0 <= density <= 1.0:
            raise UsageError(f"--density must be in [0, 1], got {density}")
        sparse_rows, sparse_cols, inner = {
            "sdd": (m, n, k),
            "dsd": (m, k, n),
            "dds": (k, n, m),
        }[kind]
        for dim in (sparse_rows, sparse_cols):
            if dim % bs:
                raise UsageError(f"dimension {dim} is not divisible by block size {bs}")
        grid_rows, grid_cols = sparse_rows // bs, sparse_cols // bs
        nnz = int(round(density * grid_rows * grid_cols))
        t = topology_with_blocks(grid_rows, grid_cols, bs, nnz, rng)
        problems.append(kernel_problem(kind, t, inner, rng, workers))
    return problems


def write_rows(rows: Iterable[BenchRow], out: Union[str, Path, TextIO]) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as f:
            write_rows(rows, f)
        return
    writer = csv.DictWriter(out, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))


def run_bench(problems: Iterable[Problem], reps: int = DEFAULT_REPS) -> list[BenchRow]:
    return [run_problem(p, reps) for p in problems]
