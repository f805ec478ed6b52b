"""Tests for the hybrid BCSR/COO topology and its transpose index."""

from __future__ import annotations

import numpy as np
import pytest

from src.sparse.topology import (
    METADATA_ENTRIES_PER_BLOCK,
    TopologyError,
    build_transpose_index,
    dump_topology,
    from_csr,
    iter_transposed,
    topology_from_blocks,
)


def _example():
    return topology_from_blocks([(0, 0), (0, 2), (1, 1)], 2, 3, block_size=2)


class TestTopologyFromBlocks:
    def test_bcsr_and_coo_arrays(self):
        t = _example()
        assert t.row_offsets.tolist() == [0, 2, 3]
        assert t.col_indices.tolist() == [0, 2, 1]
        assert t.row_indices.tolist() == [0, 0, 1]
        assert t.shape == (4, 6)

    def test_transpose_index(self):
        t = _example()
        assert t.t_col_offsets.tolist() == [0, 1, 2, 3]
        assert t.t_block_offsets.tolist() == [0, 2, 1]

    def test_coordinate_order_does_not_matter(self):
        t = topology_from_blocks([(1, 1), (0, 2), (0, 0)], 2, 3, block_size=2)
        assert t.col_indices.tolist() == [0, 2, 1]

    def test_empty_coords(self):
        t = topology_from_blocks([], 3, 2, block_size=4)
        assert t.nnz_blocks == 0
        assert t.row_offsets.tolist() == [0, 0, 0, 0]
        assert t.t_col_offsets.tolist() == [0, 0, 0]

    def test_duplicate_coordinate_raises(self):
        with pytest.raises(TopologyError, match=r"duplicate block coordinate \(1, 1\)"):
            topology_from_blocks([(1, 1), (0, 0), (1, 1)], 2, 2, block_size=1)

    def test_out_of_range_coordinate_raises(self):
        with pytest.raises(TopologyError, match="outside the 2x2 block grid"):
            topology_from_blocks([(0, 2)], 2, 2, block_size=1)

    def test_arrays_are_read_only(self):
        t = _example()
        with pytest.raises(ValueError):
            t.col_indices[0] = 1

    def test_metadata_is_three_entries_per_block(self):
        t = _example()
        assert t.metadata_entries == METADATA_ENTRIES_PER_BLOCK * t.nnz_blocks


class TestTransposeIndex:
    def test_block_diagonal_is_identity_permutation(self):
        t = topology_from_blocks([(i, i) for i in range(4)], 4, 4, block_size=2)
        assert t.t_block_offsets.tolist() == [0, 1, 2, 3]

    def test_single_block_column_is_storage_order(self):
        t = topology_from_blocks([(r, 0) for r in range(5)], 5, 1, block_size=3)
        assert t.t_block_offsets.tolist() == [0, 1, 2, 3, 4]

    def test_traversal_matches_explicit_transpose(self):
        rng = np.random.default_rng(4)
        present = rng.random((6, 6)) < 0.4
        coords = [tuple(rc) for rc in np.argwhere(present).tolist()]
        t = topology_from_blocks(coords, 6, 6, block_size=2)

        visited = [(r, c) for r, c, _ in iter_transposed(t)]
        explicit = topology_from_blocks([(c, r) for r, c in coords], 6, 6, block_size=2)
        assert [(c, r) for r, c in explicit.coords()] == visited

    def test_traversal_yields_storage_offsets(self):
        t = _example()
        assert list(iter_transposed(t)) == [(0, 0, 0), (1, 1, 2), (0, 2, 1)]

    def test_build_transpose_index_on_bare_csr(self):
        bare = from_csr([0, 2, 3], [0, 2, 1], n_block_cols=3, block_size=2)
        assert not bare.has_transpose_index
        t = build_transpose_index(bare)
        assert t.has_transpose_index
        t.validate()
        assert t.t_block_offsets.tolist() == [0, 2, 1]

    def test_column_access_without_index_raises(self):
        bare = from_csr([0, 1], [0], n_block_cols=1, block_size=1)
        with pytest.raises(TopologyError, match="no transpose index"):
            bare.col_blocks(0)


class TestFromCsr:
    def test_rejects_unsorted_columns(self):
        with pytest.raises(TopologyError, match="strictly increasing"):
            from_csr([0, 2], [1, 0], n_block_cols=2, block_size=1)

    def test_rejects_column_out_of_range(self):
        with pytest.raises(TopologyError, match="out of range"):
            from_csr([0, 1], [5], n_block_cols=2, block_size=1)

    def test_rejects_offsets_not_ending_at_nnz(self):
        with pytest.raises(TopologyError, match="end at nnz"):
            from_csr([0, 1], [0, 1], n_block_cols=2, block_size=1)


def test_dump_topology_lists_row_col_offset():
    assert dump_topology(_example()).splitlines() == ["0 0 0", "0 2 1", "1 1 2"]
