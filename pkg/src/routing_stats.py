"""Token-drop and padding statistics for synthetic top-1 routing distributions.

For each capacity factor, routes tokens with the chosen distribution, builds
the same PermutationPlan the layer uses, and reports the drop fraction, the
rows a capacity-padded layout allocates (num_experts x capacity) against the
rows the dropless block-padded layout allocates, and the per-expert load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from src.bench import UsageError
from src.moe.config import MoEConfig
from src.moe.permutation import expert_capacity, make_permutation
from src.moe.routing import RouterAssignment

logger = logging.getLogger(__name__)

DISTRIBUTIONS = ("uniform", "zipf:<a>", "onehot")
DEFAULT_SAMPLES = 16


@dataclass(frozen=True)
class Distribution:
    kind: str
    exponent: Optional[float] = None

    @property
    def is_random(self) -> bool:
        return self.kind == "zipf"

    def __str__(self) -> str:
        return f"zipf:{self.exponent:g}" if self.kind == "zipf" else self.kind


@dataclass(frozen=True)
class CapacityStats:
    capacity_factor: float
    capacity: int
    drop_fraction: float
    capacity_padded_rows: int
    block_padded_rows: float
    # Mean tokens routed to each expert, expert order.
    loads: tuple[float, ...]


def parse_distribution(text: str) -> Distribution:
    if text in ("uniform", "onehot"):
        return Distribution(text)
    if text.startswith("zipf:"):
        try:
            exponent = float(text[len("zipf:") :])
        except ValueError:
            raise UsageError(f"bad zipf exponent in {text!r}") from None
        if exponent < 0:
            raise UsageError(f"zipf exponent must be >= 0, got {exponent}")
        return Distribution("zipf", exponent)
    raise UsageError(f"--distribution must be one of {DISTRIBUTIONS}, got {text!r}")


def parse_capacity_factors(text: str) -> list[float]:
    try:
        factors = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--capacity-factor must be a comma-separated list, got {text!r}") from None
    if not factors or any(cf <= 0 for cf in factors):
        raise UsageError(f"capacity factors must be positive, got {text!r}")
    return factors


def sample_expert_ids(
    distribution: Distribution,
    num_experts: int,
    num_tokens: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """(num_tokens,) expert index per token."""
    if distribution.kind == "uniform":
        # Exact balance: round-robin.
        return np.arange(num_tokens, dtype=np.int64) % num_experts
    if distribution.kind == "onehot":
        return np.zeros(num_tokens, dtype=np.int64)
    weights = (np.arange(num_experts) + 1.0) ** -distribution.exponent
    return rng.choice(num_experts, size=num_tokens, p=weights / weights.sum()).astype(np.int64)


def _assignment(expert_ids: np.ndarray, num_experts: int) -> RouterAssignment:
    n = expert_ids.shape[0]
    probs = np.zeros((n, num_experts))
    probs[np.arange(n), expert_ids] = 1.0
    return RouterAssignment(expert_ids=expert_ids.reshape(-1, 1), gates=np.ones((n, 1)), probs=probs)


def routing_stats(
    num_experts: int,
    num_tokens: int,
    capacity_factors: Iterable[float],
    distribution: Distribution,
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    block_size: int = 128,
) -> list[CapacityStats]:
    if num_experts < 1 or num_tokens < 1:
        raise UsageError("--num-experts and --tokens must be >= 1")
    if samples < 1:
        raise UsageError(f"--samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    draws = samples if distribution.is_random else 1
    assignments = [
        _assignment(sample_expert_ids(distribution, num_experts, num_tokens, rng), num_experts)
        for _ in range(draws)
    ]

    dropless = MoEConfig(
        hidden_size=1, ffn_hidden_size=block_size, num_experts=num_experts, block_size=block_size
    )
    plans = [make_permutation(a, dropless, num_tokens) for a in assignments]
    block_rows = [p.total_padded_rows for p in plans]
    loads = np.mean([p.assigned_counts for p in plans], axis=0)

    results = []
    for cf in capacity_factors:
        config = MoEConfig(
            hidden_size=1,
            ffn_hidden_size=block_size,
            num_experts=num_experts,
            block_size=block_size,
            capacity_factor=cf,
        )
        drops = [make_permutation(a, config, num_tokens).drop_fraction for a in assignments]
        capacity = expert_capacity(num_tokens, num_experts, cf)
        stats = CapacityStats(
            capacity_factor=cf,
            capacity=capacity,
            drop_fraction=float(np.mean(drops)),
            capacity_padded_rows=num_experts * capacity,
            block_padded_rows=float(np.mean(block_rows)),
            loads=tuple(float(v) for v in loads),
        )
        logger.debug("cf=%g capacity=%d drop=%.4f", cf, capacity, stats.drop_fraction)
        results.append(stats)
    return results


def load_histogram(loads: Iterable[float], bins: int = 8) -> list[tuple[float, float, int]]:
    """(low, high, number of experts) buckets over per-expert loads."""
    values = np.asarray(list(loads), dtype=np.float64)
    counts, edges = np.histogram(values, bins=min(bins, max(1, values.size)))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(counts.size)]


def format_report(
    results: list[CapacityStats],
    num_experts: int,
    num_tokens: int,
    distribution: Distribution,
) -> str:
    lines = [
        f"distribution={distribution} num_experts={num_experts} tokens={num_tokens}",
        "capacity_factor  capacity  drop_fraction  capacity_rows  block_padded_rows",
    ]
    for r in results:
        lines.append(
            f"{r.capacity_factor:>15g}  {r.capacity:>8d}  {r.drop_fraction:>13.4f}"
            f"  {r.capacity_padded_rows:>13d}  {r.block_padded_rows:>17.1f}"
        )
    if results:
        lines.append("expert load histogram (tokens per expert: experts)")
        for low, high, count in load_histogram(results[0].loads):
            lines.append(f"  [{low:8.1f}, {high:8.1f}]: {count}")
    return "\n".join(lines)
