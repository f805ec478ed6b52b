"""Hybrid blocked-CSR-COO topology with transpose indices.

A topology describes which square blocks of a block grid are nonzero:

  - `row_offsets` / `col_indices`: BCSR. Blocks are stored row-major by block
    row, columns strictly increasing inside a row.
  - `row_indices`: the block row of every stored block, materialized so a
    worker owning block k finds its coordinates as
    (row_indices[k], col_indices[k]) without searching row_offsets.
  - `t_col_offsets` / `t_block_offsets`: transpose metadata. Per block column,
    the storage offsets (in block units) of its nonzero blocks, rows
    ascending. Values are never moved; transposed iteration goes through this
    indirection.

Storage offsets count blocks, so block k's values start at element
k * block_size**2 of the flat value array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional

import numpy as np
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

IndexArray = NDArray[np.int64]

# col_indices, row_indices, t_block_offsets
METADATA_ENTRIES_PER_BLOCK = 3


class TopologyError(ValueError):
    """Raised when block coordinates or metadata don't form a valid topology."""


def _frozen(values) -> IndexArray:
    arr = np.array(values, dtype=np.int64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BlockTopology:
    block_size: int
    n_block_rows: int
    n_block_cols: int
    row_offsets: IndexArray
    col_indices: IndexArray
    row_indices: IndexArray
    t_col_offsets: Optional[IndexArray] = None
    t_block_offsets: Optional[IndexArray] = None

    @property
    def nnz_blocks(self) -> int:
        return int(self.col_indices.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        """Logical (rows, cols) of the matrix this topology describes."""
        return (
            self.n_block_rows * self.block_size,
            self.n_block_cols * self.block_size,
        )

    @property
    def has_transpose_index(self) -> bool:
        return self.t_col_offsets is not None and self.t_block_offsets is not None

    @property
    def metadata_entries(self) -> int:
        """Per-block metadata entries stored (excludes the per-row/col offsets)."""
        entries = self.col_indices.shape[0] + self.row_indices.shape[0]
        if self.t_block_offsets is not None:
            entries += self.t_block_offsets.shape[0]
        return int(entries)

    def coords(self) -> list[tuple[int, int]]:
        """Block coordinates in storage order."""
        return list(zip(self.row_indices.tolist(), self.col_indices.tolist()))

    def row_blocks(self, r: int) -> range:
        """Storage offsets of block row r."""
        return range(int(self.row_offsets[r]), int(self.row_offsets[r + 1]))

    def col_blocks(self, c: int) -> IndexArray:
        """Storage offsets of block column c, rows ascending."""
        self._require_transpose_index()
        return self.t_block_offsets[self.t_col_offsets[c] : self.t_col_offsets[c + 1]]

    def validate(self) -> None:
        """Raise TopologyError unless every BCSR/COO/transpose invariant holds."""
        if self.block_size <= 0:
            raise TopologyError(f"block_size must be positive, got {self.block_size}")
        if self.n_block_rows < 0 or self.n_block_cols < 0:
            raise TopologyError(
                f"negative block grid {self.n_block_rows}x{self.n_block_cols}"
            )
        nnz = self.nnz_blocks
        ro = self.row_offsets
        if ro.shape[0] != self.n_block_rows + 1:
            raise TopologyError(
                f"row_offsets has {ro.shape[0]} entries, expected {self.n_block_rows + 1}"
            )
        if ro[0] != 0 or ro[-1] != nnz or np.any(np.diff(ro) < 0):
            raise TopologyError("row_offsets must start at 0, be nondecreasing and end at nnz")
        if self.row_indices.shape[0] != nnz:
            raise TopologyError("row_indices must have one entry per nonzero block")
        if nnz:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.n_block_cols:
                raise TopologyError("col_indices out of range")
            expected_rows = np.repeat(np.arange(self.n_block_rows), np.diff(ro))
            if not np.array_equal(expected_rows, self.row_indices):
                raise TopologyError("row_indices do not mirror row_offsets")
            same_row = self.row_indices[1:] == self.row_indices[:-1]
            if np.any(np.diff(self.col_indices)[same_row] <= 0):
                raise TopologyError("col_indices must be strictly increasing within a row")

        if not self.has_transpose_index:
            return
        tco = self.t_col_offsets
        tbo = self.t_block_offsets
        if tco.shape[0] != self.n_block_cols + 1 or tco[0] != 0 or tco[-1] != nnz:
            raise TopologyError("t_col_offsets must span [0, nnz] over n_block_cols + 1 entries")
        if not np.array_equal(np.sort(tbo), np.arange(nnz)):
            raise TopologyError("t_block_offsets must be a permutation of [0, nnz)")
        keys = self.col_indices[tbo] * max(self.n_block_rows, 1) + self.row_indices[tbo]
        if np.any(np.diff(keys) <= 0):
            raise TopologyError("t_block_offsets must visit blocks in (column, row) order")
        counts = np.bincount(self.col_indices, minlength=self.n_block_cols)
        if not np.array_equal(np.diff(tco), counts):
            raise TopologyError("t_col_offsets disagree with block-column counts")

    def _require_transpose_index(self) -> None:
        if not self.has_transpose_index:
            raise TopologyError("topology has no transpose index; call build_transpose_index")


def from_csr(
    row_offsets: Iterable[int],
    col_indices: Iterable[int],
    n_block_cols: int,
    block_size: int,
) -> BlockTopology:
    """Wrap BCSR arrays, materializing the COO row indices. No transpose index."""
    ro = _frozen(list(row_offsets))
    ci = _frozen(list(col_indices))
    if ro.shape[0] == 0:
        raise TopologyError("row_offsets needs at least one entry")
    n_block_rows = ro.shape[0] - 1
    counts = np.diff(ro)
    if np.any(counts < 0):
        raise TopologyError("row_offsets must be nondecreasing")
    topology = BlockTopology(
        block_size=block_size,
        n_block_rows=n_block_rows,
        n_block_cols=n_block_cols,
        row_offsets=ro,
        col_indices=ci,
        row_indices=_frozen(np.repeat(np.arange(n_block_rows), counts)),
    )
    topology.validate()
    return topology


def build_transpose_index(t: BlockTopology) -> BlockTopology:
    """Return `t` with transpose metadata filled in.

    A stable sort of the block columns keeps rows ascending inside each
    column, because storage order is already row-major.
    """
    order = np.argsort(t.col_indices, kind="stable")
    counts = np.bincount(t.col_indices, minlength=t.n_block_cols)
    t_col_offsets = np.concatenate(([0], np.cumsum(counts)))
    return replace(
        t,
        t_col_offsets=_frozen(t_col_offsets),
        t_block_offsets=_frozen(order),
    )


def topology_from_blocks(
    coords: Iterable[tuple[int, int]],
    n_block_rows: int,
    n_block_cols: int,
    block_size: int,
) -> BlockTopology:
    """Build a topology (transpose index included) from nonzero block coordinates."""
    if block_size <= 0:
        raise TopologyError(f"block_size must be positive, got {block_size}")
    pairs = np.array(list(coords), dtype=np.int64).reshape(-1, 2)
    rows, cols = pairs[:, 0], pairs[:, 1]
    if pairs.shape[0]:
        bad = (rows < 0) | (rows >= n_block_rows) | (cols < 0) | (cols >= n_block_cols)
        if np.any(bad):
            r, c = pairs[np.argmax(bad)]
            raise TopologyError(
                f"block ({r}, {c}) is outside the {n_block_rows}x{n_block_cols} block grid"
            )
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
    if np.any(dup):
        i = int(np.argmax(dup))
        raise TopologyError(f"duplicate block coordinate ({rows[i]}, {cols[i]})")

    counts = np.bincount(rows, minlength=n_block_rows)
    row_offsets = np.concatenate(([0], np.cumsum(counts)))
    csr = from_csr(row_offsets, cols, n_block_cols, block_size)
    topology = build_transpose_index(csr)
    logger.debug(
        "Topology built: grid=%dx%d block_size=%d nnz_blocks=%d",
        n_block_rows,
        n_block_cols,
        block_size,
        topology.nnz_blocks,
    )
    return topology


def iter_transposed(t: BlockTopology) -> Iterator[tuple[int, int, int]]:
    """Yield (row, col, storage_offset) in transposed (column-major) order."""
    t._require_transpose_index()
    for c in range(t.n_block_cols):
        for k in t.col_blocks(c):
            k = int(k)
            yield int(t.row_indices[k]), c, k


def dump_topology(t: BlockTopology) -> str:
    """One `r c storage_offset` line per block, sorted by storage offset."""
    return "\n".join(
        f"{r} {c} {k}" for k, (r, c) in enumerate(t.coords())
    )
