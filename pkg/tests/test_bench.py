"""Tests for the timing harness."""

from __future__ import annotations

import csv
import io

import numpy as np
import pytest

from src.bench import (
    CSV_HEADER,
    DEFAULT_REPS,
    UsageError,
    build_problems,
    dmoe_problems,
    kernel_problem,
    parse_block_sizes,
    run_bench,
    run_problem,
    topology_with_blocks,
    uniform_moe_topology,
    write_rows,
)
from src.moe.config import MoEConfig, get_preset


def _tiny_moe() -> MoEConfig:
    return MoEConfig(hidden_size=4, ffn_hidden_size=4, num_experts=2, block_size=2)


def test_default_reps_is_one_hundred():
    assert DEFAULT_REPS == 100


def test_csv_header_and_rows():
    problems = build_problems("sdd", [2], m=8, k=4, n=8, density=0.5, seed=1)
    rows = run_bench(problems, reps=2)
    buf = io.StringIO()
    write_rows(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    record = next(csv.DictReader(io.StringIO(buf.getvalue())))
    assert record["name"] == "sdd"
    assert (record["m"], record["k"], record["n"]) == ("8", "4", "8")
    assert int(record["nnz_blocks"]) == 8
    assert int(record["reps"]) == 2


def test_write_rows_to_path(tmp_path):
    rows = run_bench(build_problems("dsd", [2], m=4, k=4, n=4, density=1.0), reps=1)
    out = tmp_path / "bench.csv"
    write_rows(rows, out)
    assert out.read_text().splitlines()[0] == ",".join(CSV_HEADER)


def test_one_problem_per_block_size():
    problems = build_problems("dds", [1, 2, 4], m=8, k=8, n=8, density=0.5)
    assert [p.topology.block_size for p in problems] == [1, 2, 4]


def test_exact_block_count():
    t = topology_with_blocks(4, 4, 2, 7, np.random.default_rng(0))
    assert t.nnz_blocks == 7


def test_gflops_follow_instrumented_flops():
    rng = np.random.default_rng(2)
    t = topology_with_blocks(2, 2, 2, 3, rng)
    row = run_problem(kernel_problem("sdd", t, 5, rng), reps=3)
    assert row.gflops == pytest.approx(2 * 3 * 2 * 2 * 5 / row.mean_s / 1e9)


def test_doubling_blocks_roughly_doubles_time():
    rng = np.random.default_rng(3)
    small = topology_with_blocks(8, 8, 16, 16, rng)
    large = topology_with_blocks(8, 8, 16, 32, rng)
    t_small = run_problem(kernel_problem("sdd", small, 64, rng), reps=30).mean_s
    t_large = run_problem(kernel_problem("sdd", large, 64, rng), reps=30).mean_s
    assert 1.5 <= t_large / t_small <= 3.0


class TestPresets:
    def test_xs_preset_topology_shape(self):
        config = get_preset("xs")
        assert (config.hidden_size, config.ffn_hidden_size, config.num_experts) == (512, 2048, 64)
        t = uniform_moe_topology(config, num_tokens=1024)
        # 16 tokens per expert, each padded to one 128-row block.
        assert t.shape == (64 * 128, 64 * 2048)
        assert t.nnz_blocks == 64 * 16

    def test_dmoe_problems_cover_six_products(self):
        problems = dmoe_problems(_tiny_moe(), 8, np.random.default_rng(0))
        assert [p.name for p in problems] == [
            "dmoe_sdd",
            "dmoe_dsd",
            "dmoe_sdd_t",
            "dmoe_dstd",
            "dmoe_dsdt",
            "dmoe_ddts",
        ]
        rows = run_bench(problems, reps=1)
        assert all(r.mean_s >= 0 for r in rows)


class TestUsageErrors:
    def test_needs_exactly_one_of_density_or_preset(self):
        with pytest.raises(UsageError, match="exactly one"):
            build_problems("sdd", [2], density=0.5, preset="xs")
        with pytest.raises(UsageError, match="exactly one"):
            build_problems("sdd", [2])

    def test_dimension_must_divide_by_block_size(self):
        with pytest.raises(UsageError, match="not divisible by block size 4"):
            build_problems("sdd", [4], m=10, k=4, n=8, density=0.5)

    def test_dmoe_needs_preset(self):
        with pytest.raises(UsageError, match="needs --preset"):
            build_problems("dmoe", [2], density=0.5)

    def test_block_size_list_parsing(self):
        assert parse_block_sizes("32,64, 128") == [32, 64, 128]
        with pytest.raises(UsageError):
            parse_block_sizes("32,big")

    def test_bad_reps(self):
        problems = build_problems("sdd", [2], m=4, k=2, n=4, density=1.0)
        with pytest.raises(UsageError, match="--reps"):
            run_bench(problems, reps=0)
