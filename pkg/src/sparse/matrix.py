"""Block-sparse matrix: a topology plus contiguous dense block storage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from src.dense.ops import DenseMatrix, as_dense
from src.sparse.topology import BlockTopology, TopologyError, iter_transposed


@dataclass(frozen=True, eq=False)
class BlockSparseMatrix:
    """Blocks are stored in BCSR order as one (nnz_blocks, bs, bs) array."""

    topology: BlockTopology
    blocks: NDArray[np.float64]

    def __post_init__(self) -> None:
        bs = self.topology.block_size
        expected = (self.topology.nnz_blocks, bs, bs)
        if self.blocks.shape != expected:
            raise TopologyError(
                f"blocks have shape {self.blocks.shape}, topology needs {expected}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.topology.shape

    @property
    def nnz_blocks(self) -> int:
        return self.topology.nnz_blocks


def zeros(topology: BlockTopology) -> BlockSparseMatrix:
    bs = topology.block_size
    return BlockSparseMatrix(topology, np.zeros((topology.nnz_blocks, bs, bs)))


def to_dense(s: BlockSparseMatrix) -> DenseMatrix:
    """Densify; everything outside the nonzero blocks is zero."""
    t = s.topology
    bs = t.block_size
    out = np.zeros(t.shape, dtype=np.float64)
    for k, (r, c) in enumerate(t.coords()):
        out[r * bs : (r + 1) * bs, c * bs : (c + 1) * bs] = s.blocks[k]
    return out


def to_dense_transposed(s: BlockSparseMatrix) -> DenseMatrix:
    """Densify the transpose by walking the transpose index.

    Block (r, c) lands at (c, r) as a transposed view of its stored values.
    """
    t = s.topology
    bs = t.block_size
    rows, cols = t.shape
    out = np.zeros((cols, rows), dtype=np.float64)
    for r, c, k in iter_transposed(t):
        out[c * bs : (c + 1) * bs, r * bs : (r + 1) * bs] = s.blocks[k].T
    return out


def from_dense(d: DenseMatrix, topology: BlockTopology) -> BlockSparseMatrix:
    """Sample exactly the blocks present in `topology` from a dense matrix."""
    d = as_dense(d)
    if d.shape != topology.shape:
        raise TopologyError(
            f"dense shape {d.shape} does not match topology shape {topology.shape}"
        )
    bs = topology.block_size
    blocks = np.empty((topology.nnz_blocks, bs, bs), dtype=np.float64)
    for k, (r, c) in enumerate(topology.coords()):
        blocks[k] = d[r * bs : (r + 1) * bs, c * bs : (c + 1) * bs]
    return BlockSparseMatrix(topology, blocks)
