"""SDD / DSD / DDS block-sparse products and elementwise maps over sparse values.

Naming follows the output-left-right convention: SDD writes a sparse result
from two dense operands, DSD multiplies sparse x dense, DDS dense x sparse.
Every kernel takes transpose flags for its inputs. A transposed sparse operand
is read through the transpose index as transposed *views* of the stored
blocks; block values are never copied into transposed order.

Work is split over disjoint output regions (one block for SDD, one output
tile row for DSD, one output tile column for DDS). Each region is reduced by
a single worker in ascending block order, so results don't depend on the
worker count.
"""

from __future__ import annotations

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np
from numpy.typing import NDArray

from src.dense.ops import (
    ActivationKind,
    ActivationMode,
    DenseMatrix,
    ShapeError,
    activation,
    as_dense,
    matmul,
)
from src.sparse.matrix import BlockSparseMatrix
from src.sparse.topology import BlockTopology, TopologyError

logger = logging.getLogger(__name__)

WORKERS_ENV_VAR = "DMOE_WORKERS"


@dataclass
class KernelStats:
    """Counters accumulated while a `collect_stats()` block is active.

    value_copies counts stored blocks whose matmul operand did not share memory
    with the stored values (see `_block`).
    """

    flops: int = 0
    value_copies: int = 0
    calls: int = 0


_stats_lock = threading.Lock()
_active_stats: list[KernelStats] = []


@contextmanager
def collect_stats() -> Iterator[KernelStats]:
    """Count flops (2 per multiply-add) and copied block values inside the block."""
    stats = KernelStats()
    with _stats_lock:
        _active_stats.append(stats)
    try:
        yield stats
    finally:
        with _stats_lock:
            _active_stats.remove(stats)


def _record(flops: int, value_copies: int) -> None:
    with _stats_lock:
        for stats in _active_stats:
            stats.flops += flops
            stats.value_copies += value_copies
            stats.calls += 1


def resolve_workers(workers: Optional[int] = None) -> int:
    """Explicit worker count, else DMOE_WORKERS, else 1."""
    if workers is None:
        raw = os.environ.get(WORKERS_ENV_VAR, "1")
        try:
            workers = int(raw)
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", WORKERS_ENV_VAR, raw)
            workers = 1
    return max(1, workers)


def _spans(n: int, workers: int) -> list[range]:
    """Split range(n) into at most `workers` contiguous spans."""
    workers = max(1, min(workers, n))
    bounds = [i * n // workers for i in range(workers + 1)]
    return [range(bounds[i], bounds[i + 1]) for i in range(workers)]


def _run(task: Callable[[range], int], n: int, workers: Optional[int]) -> int:
    """Run `task` over disjoint spans of range(n); return the summed copy count."""
    if n == 0:
        return 0
    spans = _spans(n, resolve_workers(workers))
    if len(spans) == 1:
        return task(spans[0])
    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        return sum(pool.map(task, spans))


def _block(s: BlockSparseMatrix, k: int, transpose: bool) -> tuple[NDArray, int]:
    """Return block k as the array handed to matmul, and 1 if it was copied.

    The check runs on the operand after the float64 conversion matmul applies,
    so a transposed read that forced a contiguous copy is counted.
    """
    stored = s.blocks[k]
    operand = as_dense(stored.T if transpose else stored, "block")
    return operand, 0 if np.shares_memory(operand, stored) else 1


def _effective(a: DenseMatrix, transpose: bool, name: str) -> DenseMatrix:
    a = as_dense(a, name)
    return a.T if transpose else a


def _sparse_shape(s: BlockSparseMatrix, transpose: bool) -> tuple[int, int]:
    rows, cols = s.shape
    return (cols, rows) if transpose else (rows, cols)


def sdd(
    a: DenseMatrix,
    b: DenseMatrix,
    out_topology: BlockTopology,
    transpose_a: bool = False,
    transpose_b: bool = False,
    workers: Optional[int] = None,
) -> BlockSparseMatrix:
    """Sparse = dense x dense, computed only for the blocks of `out_topology`."""
    a_eff = _effective(a, transpose_a, "a")
    b_eff = _effective(b, transpose_b, "b")
    if a_eff.shape[1] != b_eff.shape[0]:
        raise ShapeError(f"sdd inner dimensions disagree: {a_eff.shape} x {b_eff.shape}")
    out_shape = (a_eff.shape[0], b_eff.shape[1])
    if out_shape != out_topology.shape:
        raise TopologyError(
            f"sdd output shape {out_shape} does not match topology shape {out_topology.shape}"
        )

    bs = out_topology.block_size
    nnz = out_topology.nnz_blocks
    blocks = np.zeros((nnz, bs, bs), dtype=np.float64)
    rows = out_topology.row_indices
    cols = out_topology.col_indices

    def task(span: range) -> int:
        for k in span:
            r, c = int(rows[k]), int(cols[k])
            blocks[k] = matmul(
                a_eff[r * bs : (r + 1) * bs, :],
                b_eff[:, c * bs : (c + 1) * bs],
            )
        return 0

    copies = _run(task, nnz, workers)
    _record(2 * nnz * bs * bs * a_eff.shape[1], copies)
    return BlockSparseMatrix(out_topology, blocks)


def dsd(
    s: BlockSparseMatrix,
    b: DenseMatrix,
    transpose_s: bool = False,
    transpose_b: bool = False,
    workers: Optional[int] = None,
) -> DenseMatrix:
    """Dense = sparse x dense."""
    t = s.topology
    b_eff = _effective(b, transpose_b, "b")
    s_rows, s_cols = _sparse_shape(s, transpose_s)
    if s_cols != b_eff.shape[0]:
        raise ShapeError(f"dsd inner dimensions disagree: {(s_rows, s_cols)} x {b_eff.shape}")
    if transpose_s:
        t._require_transpose_index()

    bs = t.block_size
    n = b_eff.shape[1]
    out = np.zeros((s_rows, n), dtype=np.float64)
    n_tile_rows = t.n_block_cols if transpose_s else t.n_block_rows

    def task(span: range) -> int:
        copies = 0
        for i in span:
            tile = out[i * bs : (i + 1) * bs]
            if transpose_s:
                # Output tile row i is block column i of s.
                for k in t.col_blocks(i):
                    k = int(k)
                    block, copied = _block(s, k, transpose=True)
                    r = int(t.row_indices[k])
                    tile += matmul(block, b_eff[r * bs : (r + 1) * bs])
                    copies += copied
            else:
                for k in t.row_blocks(i):
                    block, copied = _block(s, k, transpose=False)
                    c = int(t.col_indices[k])
                    tile += matmul(block, b_eff[c * bs : (c + 1) * bs])
                    copies += copied
        return copies

    copies = _run(task, n_tile_rows, workers)
    _record(2 * t.nnz_blocks * bs * bs * n, copies)
    return out


def dds(
    a: DenseMatrix,
    s: BlockSparseMatrix,
    transpose_a: bool = False,
    transpose_s: bool = False,
    workers: Optional[int] = None,
) -> DenseMatrix:
    """Dense = dense x sparse."""
    t = s.topology
    a_eff = _effective(a, transpose_a, "a")
    s_rows, s_cols = _sparse_shape(s, transpose_s)
    if a_eff.shape[1] != s_rows:
        raise ShapeError(f"dds inner dimensions disagree: {a_eff.shape} x {(s_rows, s_cols)}")
    if not transpose_s:
        t._require_transpose_index()

    bs = t.block_size
    m = a_eff.shape[0]
    out = np.zeros((m, s_cols), dtype=np.float64)
    n_tile_cols = t.n_block_rows if transpose_s else t.n_block_cols

    def task(span: range) -> int:
        copies = 0
        for j in span:
            tile = out[:, j * bs : (j + 1) * bs]
            if transpose_s:
                # Output tile column j is block row j of s, read transposed.
                for k in t.row_blocks(j):
                    block, copied = _block(s, k, transpose=True)
                    c = int(t.col_indices[k])
                    tile += matmul(a_eff[:, c * bs : (c + 1) * bs], block)
                    copies += copied
            else:
                # Output tile column j is block column j of s.
                for k in t.col_blocks(j):
                    k = int(k)
                    block, copied = _block(s, k, transpose=False)
                    r = int(t.row_indices[k])
                    tile += matmul(a_eff[:, r * bs : (r + 1) * bs], block)
                    copies += copied
        return copies

    copies = _run(task, n_tile_cols, workers)
    _record(2 * t.nnz_blocks * bs * bs * m, copies)
    return out


def sparse_map(
    s: BlockSparseMatrix,
    kind: ActivationKind,
    mode: ActivationMode = "forward",
) -> BlockSparseMatrix:
    """Apply an activation (or its derivative) to the stored blocks only."""
    return BlockSparseMatrix(s.topology, activation(kind, s.blocks, mode))


def sparse_mul(x: BlockSparseMatrix, y: BlockSparseMatrix) -> BlockSparseMatrix:
    """Elementwise product of two matrices that share one topology."""
    if x.topology is not y.topology and not _same_pattern(x.topology, y.topology):
        raise TopologyError("sparse_mul operands have different topologies")
    return BlockSparseMatrix(x.topology, x.blocks * y.blocks)


def _same_pattern(a: BlockTopology, b: BlockTopology) -> bool:
    return (
        a.block_size == b.block_size
        and a.shape == b.shape
        and np.array_equal(a.row_offsets, b.row_offsets)
        and np.array_equal(a.col_indices, b.col_indices)
    )
