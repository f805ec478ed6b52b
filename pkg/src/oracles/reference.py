"""Independent reference implementations.

Nothing here calls the kernels, the permutation code or dense.ops; products
use numpy's `@` and routing/capacity are re-derived with plain loops, so a bug
in the code under test can't cancel out against its own oracle.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Union

import numpy as np

from src.moe.config import MoEConfig
from src.moe.weights import MoEWeights
from src.sparse.topology import BlockTopology

# Denominator floor of the relative-error metric.
RELATIVE_ERROR_FLOOR = 1e-8

Params = Union[np.ndarray, Mapping[str, np.ndarray]]


def relative_error(a, b, floor: float = RELATIVE_ERROR_FLOOR) -> float:
    """max over coordinates of |a-b| / max(floor, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"relative_error shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def max_abs_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"max_abs_error shape mismatch: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def block_mask(topology: BlockTopology) -> np.ndarray:
    """Dense 0/1 mask of the topology's nonzero blocks."""
    bs = topology.block_size
    mask = np.zeros(topology.shape)
    for r, c in zip(topology.row_indices.tolist(), topology.col_indices.tolist()):
        mask[r * bs : (r + 1) * bs, c * bs : (c + 1) * bs] = 1.0
    return mask


def masked_matmul_oracle(
    a: np.ndarray,
    b: np.ndarray,
    topology: BlockTopology,
    transpose_a: bool = False,
    transpose_b: bool = False,
) -> np.ndarray:
    """Dense product with every block outside `topology` zeroed."""
    a_eff = np.asarray(a, dtype=np.float64)
    b_eff = np.asarray(b, dtype=np.float64)
    if transpose_a:
        a_eff = a_eff.T
    if transpose_b:
        b_eff = b_eff.T
    if a_eff.shape[1] != b_eff.shape[0]:
        raise ValueError(f"shape mismatch: {a_eff.shape} x {b_eff.shape}")
    product = a_eff @ b_eff
    if product.shape != topology.shape:
        raise ValueError(
            f"product shape {product.shape} does not match topology {topology.shape}"
        )
    return product * block_mask(topology)


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.where(z > 0, z, 0.0)
    if kind == "gelu":
        return 0.5 * z * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (z + 0.044715 * z**3)))
    raise ValueError(f"unknown activation {kind!r}")


def per_expert_moe_oracle(x: np.ndarray, w: MoEWeights, config: MoEConfig) -> np.ndarray:
    """Loop over experts, run each one's 2-layer MLP on its tokens, recombine.

    No padding and no blocks. In capacity mode each expert keeps its earliest
    tokens by position.
    """
    x = np.asarray(x, dtype=np.float64)
    num_tokens = x.shape[0]
    num_experts, ffn = config.num_experts, config.ffn_hidden_size

    logits = x @ w.router_w
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs = probs / probs.sum(axis=1, keepdims=True)

    choices: list[list[tuple[int, float]]] = []
    for t in range(num_tokens):
        row = probs[t].tolist()
        ranked = sorted(range(num_experts), key=lambda e: (-row[e], e))[: config.top_k]
        gates = [row[e] for e in ranked]
        if config.renormalize_gates:
            total = sum(gates)
            gates = [g / total for g in gates]
        choices.append(list(zip(ranked, gates)))

    capacity = None
    if config.capacity_factor is not None:
        capacity = math.ceil(round(num_tokens * config.capacity_factor / num_experts, 9))

    out = np.zeros((num_tokens, config.hidden_size))
    for e in range(num_experts):
        members = [
            (t, gate) for t in range(num_tokens) for expert, gate in choices[t] if expert == e
        ]
        if capacity is not None:
            members = members[:capacity]
        if not members:
            continue
        idx = [t for t, _ in members]
        w1_e = w.w1[:, e * ffn : (e + 1) * ffn]
        w2_e = w.w2[e * ffn : (e + 1) * ffn, :]
        y_e = _act(config.activation, x[idx] @ w1_e) @ w2_e
        for row, (t, gate) in enumerate(members):
            out[t] += gate * y_e[row]
    return out


def finite_diff_grad(
    loss_fn: Callable[..., float], params: Params, h: float = 1e-5
) -> Params:
    """Central differences (f(p+h) - f(p-h)) / 2h for every coordinate.

    `params` is one array (loss_fn takes it) or a mapping of named arrays
    (loss_fn takes the mapping). Inputs are not modified.
    """
    if isinstance(params, Mapping):
        work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
        grads = {name: np.zeros_like(value) for name, value in work.items()}
        for name, value in work.items():
            _central_differences(lambda: loss_fn(work), value, grads[name], h)
        return grads

    value = np.array(params, dtype=np.float64)
    grad = np.zeros_like(value)
    _central_differences(lambda: loss_fn(value), value, grad, h)
    return grad


def _central_differences(
    evaluate: Callable[[], float], value: np.ndarray, grad: np.ndarray, h: float
) -> None:
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.shape[0]):
        original = flat[i]
        flat[i] = original + h
        f_plus = evaluate()
        flat[i] = original - h
        f_minus = evaluate()
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * h)
