"""Dropless MoE forward/backward and the token-dropping baseline.

Forward:
    assignment = router(x)
    plan, topology = permutation and block-diagonal topology of assignment
    x_g    = padded_gather(x)                 (T_pad, hidden)
    h_pre  = SDD(x_g, w1, topology)            (T_pad, E*ffn) sparse
    h_post = act(h_pre)
    y_g    = DSD(h_post, w2)                   (T_pad, hidden)
    y      = padded_scatter(y_g) with gates    (T, hidden)

Backward (second layer first):
    dh_post = SDD(dy_g, w2^T)      grad_w2 = DS^T D(h_post, dy_g)
    dh_pre  = dh_post * act'(h_pre)
    dx_g    = DSD(dh_pre, w1^T)    grad_w1 = DD^T S(x_g, dh_pre)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from src.dense.ops import DenseMatrix, ShapeError, as_dense, matmul
from src.moe.config import DROPLESS, ConfigError, MoEConfig
from src.moe.permutation import (
    PermutationPlan,
    make_permutation,
    moe_topology,
    padded_gather,
    padded_gather_backward,
    padded_scatter,
    padded_scatter_backward,
)
from src.moe.routing import (
    RouterAssignment,
    gate_grad_to_probs,
    router_forward,
    softmax_backward,
)
from src.moe.weights import MoEGrads, MoEWeights
from src.sparse.kernels import dds, dsd, sdd, sparse_map, sparse_mul
from src.sparse.matrix import BlockSparseMatrix
from src.sparse.topology import BlockTopology

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MoECache:
    """Intermediates kept by the forward pass for the backward pass."""

    config: MoEConfig
    x: DenseMatrix
    x_g: DenseMatrix
    h_pre: BlockSparseMatrix
    h_post: BlockSparseMatrix
    y_g: DenseMatrix
    plan: PermutationPlan
    topology: BlockTopology
    assignment: RouterAssignment

    @property
    def probs(self) -> DenseMatrix:
        return self.assignment.probs


@dataclass(frozen=True)
class DropStats:
    per_expert: tuple[float, ...]
    overall: float
    dropped: int
    assigned: int


def _forward(
    x: DenseMatrix, w: MoEWeights, config: MoEConfig, workers: Optional[int]
) -> tuple[DenseMatrix, MoECache]:
    x = as_dense(x, "x")
    if x.shape[1] != config.hidden_size:
        raise ShapeError(
            f"x has {x.shape[1]} features, config hidden_size is {config.hidden_size}"
        )
    w.check(config)

    assignment = router_forward(
        x, w.router_w, config.top_k, renormalize_gates=config.renormalize_gates
    )
    plan = make_permutation(assignment, config, x.shape[0])
    topology = moe_topology(plan, config)

    x_g = padded_gather(x, plan)
    h_pre = sdd(x_g, w.w1, topology, workers=workers)
    h_post = sparse_map(h_pre, config.activation, "forward")
    y_g = dsd(h_post, w.w2, workers=workers)
    y = padded_scatter(y_g, plan, assignment)

    logger.debug(
        "MoE forward: tokens=%d padded_rows=%d nnz_blocks=%d counts=%s",
        x.shape[0],
        plan.total_padded_rows,
        topology.nnz_blocks,
        plan.counts.tolist(),
    )
    cache = MoECache(
        config=config,
        x=x,
        x_g=x_g,
        h_pre=h_pre,
        h_post=h_post,
        y_g=y_g,
        plan=plan,
        topology=topology,
        assignment=assignment,
    )
    return y, cache


def dmoe_forward(
    x: DenseMatrix, w: MoEWeights, config: MoEConfig, workers: Optional[int] = None
) -> tuple[DenseMatrix, MoECache]:
    """Dropless forward pass. Any capacity_factor on `config` is ignored."""
    if not config.is_dropless:
        config = replace(config, capacity_factor=DROPLESS)
    return _forward(x, w, config, workers)


def moe_dropping_forward(
    x: DenseMatrix, w: MoEWeights, config: MoEConfig, workers: Optional[int] = None
) -> tuple[DenseMatrix, MoECache, DropStats]:
    """Token-dropping forward pass with a finite capacity factor.

    Dropped tokens come out as zero rows; adding the residual back is the
    caller's business.
    """
    if config.is_dropless:
        raise ConfigError("moe_dropping_forward needs a finite capacity_factor")
    y, cache = _forward(x, w, config, workers)
    return y, cache, drop_stats(cache.plan)


def drop_stats(plan: PermutationPlan) -> DropStats:
    dropped_per_expert = plan.assigned_counts - plan.counts
    per_expert = dropped_per_expert / np.maximum(plan.assigned_counts, 1)
    assigned = int(plan.assigned_counts.sum())
    dropped = int(dropped_per_expert.sum())
    return DropStats(
        per_expert=tuple(float(v) for v in per_expert),
        overall=dropped / assigned if assigned else 0.0,
        dropped=dropped,
        assigned=assigned,
    )


def dmoe_backward(
    dy: DenseMatrix,
    cache: MoECache,
    w: MoEWeights,
    d_probs: Optional[DenseMatrix] = None,
    workers: Optional[int] = None,
) -> tuple[DenseMatrix, MoEGrads]:
    """Gradients of the layer inputs and parameters.

    `d_probs` is an extra gradient wrt the router probabilities, e.g. the one
    returned by load_balance_loss; it joins the gate path before the softmax.
    """
    dy = as_dense(dy, "dy")
    config = cache.config
    plan, assignment = cache.plan, cache.assignment
    expected = (plan.num_tokens, config.hidden_size)
    if dy.shape != expected:
        raise ShapeError(f"dy has shape {dy.shape}, forward output was {expected}")
    try:
        w.check(config)
    except ShapeError as e:
        raise ShapeError(f"weights do not match the cached forward pass: {e}") from e

    dy_g, d_gates = padded_scatter_backward(dy, cache.y_g, plan, assignment)

    # Second layer.
    dh_post = sdd(dy_g, w.w2, cache.topology, transpose_b=True, workers=workers)
    grad_w2 = dsd(cache.h_post, dy_g, transpose_s=True, workers=workers)

    # Activation.
    dh_pre = sparse_mul(dh_post, sparse_map(cache.h_pre, config.activation, "grad"))

    # First layer.
    dx_g = dsd(dh_pre, w.w1, transpose_b=True, workers=workers)
    grad_w1 = dds(cache.x_g, dh_pre, transpose_a=True, workers=workers)
    dx = padded_gather_backward(dx_g, plan)

    # Router, through the gates (and any extra probability gradient).
    d_p = gate_grad_to_probs(assignment, d_gates, config.renormalize_gates)
    if d_probs is not None:
        d_p = d_p + d_probs
    d_logits = softmax_backward(assignment.probs, d_p)
    grad_router = matmul(cache.x, d_logits, transpose_a=True)
    dx = dx + matmul(d_logits, w.router_w, transpose_b=True)

    return dx, MoEGrads(router_w=grad_router, w1=grad_w1, w2=grad_w2)
