"""Learned top-k router and the load-balancing auxiliary loss.

Gates are the softmax probabilities of the selected experts; with
`renormalize_gates` they are rescaled to sum to 1 over the token's top-k.
Expert ids are not differentiable, so the router only receives gradient
through the gate values (and through the auxiliary loss).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from src.dense.ops import DenseMatrix, ShapeError, as_dense, matmul, softmax_rows
from src.moe.config import ConfigError, MoEConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RouterAssignment:
    """Per-token top-k routing, shape (num_tokens, top_k) for ids and gates."""

    expert_ids: NDArray[np.int64]
    gates: NDArray[np.float64]
    probs: DenseMatrix

    @property
    def num_tokens(self) -> int:
        return int(self.expert_ids.shape[0])

    @property
    def top_k(self) -> int:
        return int(self.expert_ids.shape[1])

    @property
    def num_experts(self) -> int:
        return int(self.probs.shape[1])


def select_top_k(
    probs: DenseMatrix, top_k: int, renormalize_gates: bool = False
) -> RouterAssignment:
    """Greedy top-k by probability; ties go to the lower expert index."""
    num_experts = probs.shape[1]
    if not 1 <= top_k <= num_experts:
        raise ConfigError(f"top_k={top_k} must be between 1 and num_experts={num_experts}")
    # A stable sort keeps equal probabilities in ascending expert order.
    expert_ids = np.argsort(-probs, axis=1, kind="stable")[:, :top_k].astype(np.int64)
    gates = np.take_along_axis(probs, expert_ids, axis=1)
    if renormalize_gates:
        gates = gates / gates.sum(axis=1, keepdims=True)
    return RouterAssignment(expert_ids=expert_ids, gates=gates, probs=probs)


def router_forward(
    x: DenseMatrix,
    router_w: DenseMatrix,
    top_k: int,
    renormalize_gates: bool = False,
) -> RouterAssignment:
    """Project tokens to expert scores, softmax, and pick the top_k experts."""
    x = as_dense(x, "x")
    router_w = as_dense(router_w, "router_w")
    if x.shape[1] != router_w.shape[0]:
        raise ShapeError(
            f"router input has {x.shape[1]} features, router_w expects {router_w.shape[0]}"
        )
    probs = softmax_rows(matmul(x, router_w))
    return select_top_k(probs, top_k, renormalize_gates)


def gate_grad_to_probs(
    assignment: RouterAssignment, d_gates: NDArray[np.float64], renormalize_gates: bool
) -> DenseMatrix:
    """Backpropagate gate gradients onto the full probability matrix."""
    probs = assignment.probs
    d_probs = np.zeros_like(probs)
    rows = np.arange(assignment.num_tokens)[:, None]
    if renormalize_gates:
        selected = np.take_along_axis(probs, assignment.expert_ids, axis=1)
        total = selected.sum(axis=1, keepdims=True)
        weighted = (d_gates * assignment.gates).sum(axis=1, keepdims=True)
        d_selected = (d_gates - weighted) / total
    else:
        d_selected = d_gates
    d_probs[rows, assignment.expert_ids] += d_selected
    return d_probs


def softmax_backward(probs: DenseMatrix, d_probs: DenseMatrix) -> DenseMatrix:
    """Gradient wrt the softmax logits given the gradient wrt its output."""
    inner = (d_probs * probs).sum(axis=1, keepdims=True)
    return probs * (d_probs - inner)


def load_balance_loss(
    assignment: RouterAssignment, config: MoEConfig
) -> tuple[float, DenseMatrix]:
    """Switch-style balance loss and its gradient wrt the router probabilities.

    loss = coefficient * E * sum_e f_e * P_e, with f_e the fraction of tokens
    whose top-1 choice is e (held constant) and P_e the mean probability of e.
    """
    probs = assignment.probs
    num_tokens, num_experts = probs.shape
    top1 = assignment.expert_ids[:, 0]
    f = np.bincount(top1, minlength=num_experts) / num_tokens
    p_mean = probs.mean(axis=0)
    scale = config.aux_loss_coefficient * num_experts
    loss = float(scale * np.dot(f, p_mean))
    grad = np.broadcast_to(scale * f / num_tokens, probs.shape).copy()
    return loss, grad
