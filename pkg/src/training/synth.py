"""Synthetic clustered regression task.

Each token comes from one of `num_clusters` clusters: x = centroid + noise,
target = M_c @ x with a fixed random linear map per cluster, so routing each
cluster to its own expert is the optimal solution. Cluster frequencies follow
(c+1)^-skew; skew=0 assigns clusters round-robin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.dense.ops import DenseMatrix
from src.moe.config import ConfigError


@dataclass(frozen=True)
class SynthTaskConfig:
    num_clusters: int = 4
    tokens_per_batch: int = 256
    hidden_size: int = 16
    noise_std: float = 0.1
    skew: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clusters < 1:
            raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if self.tokens_per_batch < 1 or self.hidden_size < 1:
            raise ConfigError("tokens_per_batch and hidden_size must be >= 1")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.skew < 0:
            raise ConfigError(f"skew must be >= 0, got {self.skew}")


def cluster_frequencies(cfg: SynthTaskConfig) -> np.ndarray:
    weights = (np.arange(cfg.num_clusters) + 1.0) ** -cfg.skew
    return weights / weights.sum()


def task_parameters(cfg: SynthTaskConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (centroids, maps) for the task, derived from the seed alone."""
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden_size
    centroids = rng.standard_normal((cfg.num_clusters, h))
    maps = rng.standard_normal((cfg.num_clusters, h, h)) / np.sqrt(h)
    return centroids, maps


def sample_clusters(cfg: SynthTaskConfig, step: int) -> np.ndarray:
    n = cfg.tokens_per_batch
    if cfg.skew == 0:
        return np.arange(n) % cfg.num_clusters
    rng = np.random.default_rng([cfg.seed, step, 0])
    return rng.choice(cfg.num_clusters, size=n, p=cluster_frequencies(cfg))


def synth_batch(cfg: SynthTaskConfig, step: int) -> tuple[DenseMatrix, DenseMatrix]:
    """Deterministic (x, target) batch for (seed, step)."""
    centroids, maps = task_parameters(cfg)
    clusters = sample_clusters(cfg, step)
    rng = np.random.default_rng([cfg.seed, step, 1])
    x = centroids[clusters] + cfg.noise_std * rng.standard_normal(
        (cfg.tokens_per_batch, cfg.hidden_size)
    )
    target = np.einsum("nij,nj->ni", maps[clusters], x)
    return x, target
