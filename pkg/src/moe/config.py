"""MoE layer hyperparameters and named model-size presets.

`capacity_factor=DROPLESS` (None) means no expert capacity: every token is
computed, and each expert's group is only padded up to a block_size multiple.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from src.dense.ops import ACTIVATIONS

DROPLESS = None

DEFAULT_AUX_LOSS_COEFFICIENT = 0.01


class ConfigError(ValueError):
    """Raised when an MoE / training configuration is invalid."""


@dataclass(frozen=True)
class MoEConfig:
    hidden_size: int
    ffn_hidden_size: int
    num_experts: int
    top_k: int = 1
    block_size: int = 128
    activation: str = "gelu"
    capacity_factor: Optional[float] = DROPLESS
    aux_loss_coefficient: float = DEFAULT_AUX_LOSS_COEFFICIENT
    renormalize_gates: bool = False

    def __post_init__(self) -> None:
        for name in ("hidden_size", "ffn_hidden_size", "num_experts", "block_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.ffn_hidden_size % self.block_size:
            raise ConfigError(
                f"ffn_hidden_size={self.ffn_hidden_size} is not divisible by "
                f"block_size={self.block_size}"
            )
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k={self.top_k} must be between 1 and num_experts={self.num_experts}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation={self.activation!r} must be one of {ACTIVATIONS}"
            )
        if self.capacity_factor is not DROPLESS and not self.capacity_factor > 0:
            raise ConfigError(
                f"capacity_factor must be positive or DROPLESS, got {self.capacity_factor}"
            )
        if self.aux_loss_coefficient < 0:
            raise ConfigError(
                f"aux_loss_coefficient must be >= 0, got {self.aux_loss_coefficient}"
            )

    @property
    def is_dropless(self) -> bool:
        return self.capacity_factor is DROPLESS

    @property
    def blocks_per_expert(self) -> int:
        """Block columns spanned by one expert's slice of w1."""
        return self.ffn_hidden_size // self.block_size

    @property
    def inner_dim(self) -> int:
        return self.num_experts * self.ffn_hidden_size


# Transformer XS/Small/Medium hidden sizes with every FFN replaced by a
# 64-expert top-1 MoE; ffn_hidden_size = 4 x hidden_size, 128x128 blocks.
PRESETS: dict[str, MoEConfig] = {
    "xs": MoEConfig(hidden_size=512, ffn_hidden_size=2048, num_experts=64, top_k=1),
    "small": MoEConfig(hidden_size=768, ffn_hidden_size=3072, num_experts=64, top_k=1),
    "medium": MoEConfig(hidden_size=1024, ffn_hidden_size=4096, num_experts=64, top_k=1),
}


def get_preset(name: str) -> MoEConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r} (expected one of {sorted(PRESETS)})"
        ) from None
