"""MoE parameters and gradients.

Shapes:
  router_w: (hidden_size, num_experts)
  w1:       (hidden_size, num_experts * ffn_hidden_size)
  w2:       (num_experts * ffn_hidden_size, hidden_size)
Expert e owns columns [e*F, (e+1)*F) of w1 and the same rows of w2. No biases.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from src.dense.ops import DenseMatrix, ShapeError
from src.moe.config import MoEConfig

PARAM_NAMES = ("router_w", "w1", "w2")


@dataclass
class MoEWeights:
    router_w: DenseMatrix
    w1: DenseMatrix
    w2: DenseMatrix

    def as_dict(self) -> dict[str, DenseMatrix]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def check(self, config: MoEConfig) -> None:
        """Raise ShapeError unless the arrays match `config`."""
        expected = expected_shapes(config)
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"{name} has shape {actual}, config needs {shape}")


@dataclass
class MoEGrads:
    router_w: DenseMatrix
    w1: DenseMatrix
    w2: DenseMatrix

    def as_dict(self) -> dict[str, DenseMatrix]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def expected_shapes(config: MoEConfig) -> dict[str, tuple[int, int]]:
    h, inner = config.hidden_size, config.inner_dim
    return {
        "router_w": (h, config.num_experts),
        "w1": (h, inner),
        "w2": (inner, h),
    }


def init_weights(config: MoEConfig, rng: np.random.Generator, scale: float = 1.0) -> MoEWeights:
    """Normal init scaled by 1/sqrt(fan_in)."""
    h, f = config.hidden_size, config.ffn_hidden_size
    shapes = expected_shapes(config)
    return MoEWeights(
        router_w=rng.standard_normal(shapes["router_w"]) * scale / np.sqrt(h),
        w1=rng.standard_normal(shapes["w1"]) * scale / np.sqrt(h),
        w2=rng.standard_normal(shapes["w2"]) * scale / np.sqrt(f),
    )
