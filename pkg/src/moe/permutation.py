"""Expert-grouped token permutation with block padding.

Each kept (token, k-slot) pair is given one row of the permuted activation
matrix. Rows are grouped by expert, tokens ascending inside a group, and each
group is zero-padded at its tail to a multiple of block_size, so every expert
owns whole block rows of the block-diagonal topology.

Capacity mode keeps, per expert, the earliest `capacity` pairs by token
position and drops the rest. Dropless mode keeps everything.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from src.dense.ops import DenseMatrix, ShapeError, as_dense
from src.moe.config import ConfigError, MoEConfig
from src.moe.routing import RouterAssignment
from src.sparse.topology import BlockTopology, topology_from_blocks

logger = logging.getLogger(__name__)

IndexArray = NDArray[np.int64]


def expert_capacity(num_tokens: int, num_experts: int, capacity_factor: float) -> int:
    """ceil(num_tokens * capacity_factor / num_experts).

    Rounded to 9 decimals first so float noise (e.g. 100 * 1.1) can't push an
    exact quotient up by one.
    """
    return math.ceil(round(num_tokens * capacity_factor / num_experts, 9))


@dataclass(frozen=True, eq=False)
class PermutationPlan:
    num_tokens: int
    top_k: int
    block_size: int
    capacity: Optional[int]
    # Kept pairs per expert, before and after block padding.
    counts: IndexArray
    padded_counts: IndexArray
    # (n_kept, 2) array of (token, slot), grouped by expert, tokens ascending.
    gather_order: IndexArray
    # Destination row of each gather_order entry.
    gather_rows: IndexArray
    # (num_tokens, top_k) permuted row of each pair, -1 when dropped.
    slot_rows: IndexArray
    # (n_dropped, 2) array of (token, slot) excluded by capacity.
    dropped: IndexArray
    # Per-expert pairs assigned by the router, before capacity is applied.
    assigned_counts: IndexArray

    @property
    def num_experts(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total_padded_rows(self) -> int:
        return int(self.padded_counts.sum())

    @property
    def group_offsets(self) -> IndexArray:
        """First permuted row of each expert's group (length num_experts + 1)."""
        return np.concatenate(([0], np.cumsum(self.padded_counts))).astype(np.int64)

    @property
    def drop_fraction(self) -> float:
        total = self.num_tokens * self.top_k
        return float(self.dropped.shape[0] / total) if total else 0.0


def make_permutation(
    assignment: RouterAssignment, config: MoEConfig, num_tokens: int
) -> PermutationPlan:
    """Group (token, slot) pairs by expert, apply capacity, pad to block_size."""
    ids = assignment.expert_ids
    if ids.shape[0] != num_tokens:
        raise ShapeError(
            f"assignment covers {ids.shape[0]} tokens, expected {num_tokens}"
        )
    top_k = ids.shape[1]
    num_experts = config.num_experts
    bs = config.block_size

    tokens = np.repeat(np.arange(num_tokens, dtype=np.int64), top_k)
    slots = np.tile(np.arange(top_k, dtype=np.int64), num_tokens)
    experts = ids.reshape(-1).astype(np.int64)
    order = np.lexsort((slots, tokens, experts))
    tokens, slots, experts = tokens[order], slots[order], experts[order]

    assigned = np.bincount(experts, minlength=num_experts).astype(np.int64)
    group_starts = np.concatenate(([0], np.cumsum(assigned)[:-1]))
    rank_in_group = np.arange(experts.shape[0]) - group_starts[experts]

    capacity = None
    if config.is_dropless:
        kept = np.ones(experts.shape[0], dtype=bool)
    else:
        capacity = expert_capacity(num_tokens, num_experts, config.capacity_factor)
        kept = rank_in_group < capacity

    counts = np.bincount(experts[kept], minlength=num_experts).astype(np.int64)
    padded = (-(-counts // bs) * bs).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(padded)[:-1]))
    gather_rows = (offsets[experts] + rank_in_group)[kept].astype(np.int64)

    slot_rows = np.full((num_tokens, top_k), -1, dtype=np.int64)
    slot_rows[tokens[kept], slots[kept]] = gather_rows

    dropped = np.stack([tokens[~kept], slots[~kept]], axis=1).astype(np.int64)
    if dropped.shape[0]:
        logger.debug(
            "Capacity %d dropped %d of %d token assignments",
            capacity,
            dropped.shape[0],
            experts.shape[0],
        )

    return PermutationPlan(
        num_tokens=num_tokens,
        top_k=top_k,
        block_size=bs,
        capacity=capacity,
        counts=counts,
        padded_counts=padded,
        gather_order=np.stack([tokens[kept], slots[kept]], axis=1).astype(np.int64),
        gather_rows=gather_rows,
        slot_rows=slot_rows,
        dropped=dropped.reshape(-1, 2),
        assigned_counts=assigned,
    )


def padded_gather(x: DenseMatrix, plan: PermutationPlan) -> DenseMatrix:
    """Permute token rows into expert groups; pad rows are zero."""
    x = as_dense(x, "x")
    if x.shape[0] != plan.num_tokens:
        raise ShapeError(f"x has {x.shape[0]} rows, plan expects {plan.num_tokens}")
    out = np.zeros((plan.total_padded_rows, x.shape[1]), dtype=np.float64)
    out[plan.gather_rows] = x[plan.gather_order[:, 0]]
    return out


def padded_scatter(
    y: DenseMatrix, plan: PermutationPlan, assignment: RouterAssignment
) -> DenseMatrix:
    """Un-permute and combine: token t gets sum over kept slots of gate * y[row].

    Slots are summed in ascending slot order; dropped slots add nothing.
    """
    y = as_dense(y, "y")
    if y.shape[0] != plan.total_padded_rows:
        raise ShapeError(
            f"y has {y.shape[0]} rows, plan has {plan.total_padded_rows} padded rows"
        )
    out = np.zeros((plan.num_tokens, y.shape[1]), dtype=np.float64)
    for slot in range(plan.top_k):
        rows = plan.slot_rows[:, slot]
        kept = rows >= 0
        out[kept] += assignment.gates[kept, slot, None] * y[rows[kept]]
    return out


def padded_scatter_backward(
    dy: DenseMatrix, y: DenseMatrix, plan: PermutationPlan, assignment: RouterAssignment
) -> tuple[DenseMatrix, NDArray[np.float64]]:
    """Adjoint of padded_scatter.

    Returns (dy_g, d_gates): dy_g holds gate * dy[token] on each kept row and
    zeros on pad rows; d_gates[t, k] = <y[row], dy[t]> for kept slots.
    """
    dy = as_dense(dy, "dy")
    dy_g = np.zeros((plan.total_padded_rows, dy.shape[1]), dtype=np.float64)
    d_gates = np.zeros((plan.num_tokens, plan.top_k), dtype=np.float64)
    for slot in range(plan.top_k):
        rows = plan.slot_rows[:, slot]
        kept = rows >= 0
        dy_g[rows[kept]] = assignment.gates[kept, slot, None] * dy[kept]
        d_gates[kept, slot] = np.einsum("ij,ij->i", y[rows[kept]], dy[kept])
    return dy_g, d_gates


def padded_gather_backward(dx_g: DenseMatrix, plan: PermutationPlan) -> DenseMatrix:
    """Adjoint of padded_gather: sum each token's permuted-row gradients."""
    dx = np.zeros((plan.num_tokens, dx_g.shape[1]), dtype=np.float64)
    for slot in range(plan.top_k):
        rows = plan.slot_rows[:, slot]
        kept = rows >= 0
        dx[kept] += dx_g[rows[kept]]
    return dx


def moe_topology(plan: PermutationPlan, config: MoEConfig) -> BlockTopology:
    """Block-diagonal topology with one dense rectangle per non-empty expert.

    Expert e covers its padded_counts[e] / block_size block rows and block
    columns [e*F, (e+1)*F) with F = ffn_hidden_size / block_size.
    """
    bs = config.block_size
    if config.ffn_hidden_size % bs:
        raise ConfigError(
            f"ffn_hidden_size={config.ffn_hidden_size} is not divisible by block_size={bs}"
        )
    if plan.block_size != bs:
        raise ConfigError(f"plan was padded to {plan.block_size}, config uses {bs}")
    per_expert = config.blocks_per_expert
    block_offsets = plan.group_offsets // bs

    coords: list[tuple[int, int]] = []
    for e in range(config.num_experts):
        n_rows = int(plan.padded_counts[e]) // bs
        if n_rows == 0:
            continue
        first_col = e * per_expert
        for r in range(int(block_offsets[e]), int(block_offsets[e]) + n_rows):
            coords.extend((r, c) for c in range(first_col, first_col + per_expert))

    return topology_from_blocks(
        coords,
        n_block_rows=plan.total_padded_rows // bs,
        n_block_cols=config.num_experts * per_expert,
        block_size=bs,
    )
