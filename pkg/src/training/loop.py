"""Training loop for the MoE layer on the synthetic regression task.

Objective per step: MSE(y, target) + load-balancing aux loss. Dropless mode
uses dmoe_forward; capacity mode uses moe_dropping_forward with the given
capacity factor. Everything is seeded by the task seed, so a run is bitwise
reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from src.moe.config import DROPLESS, ConfigError, MoEConfig
from src.moe.layer import dmoe_backward, dmoe_forward, moe_dropping_forward
from src.moe.routing import load_balance_loss
from src.moe.weights import MoEWeights, init_weights
from src.training.optim import AdamState, adam_step, clip_by_global_norm
from src.training.synth import SynthTaskConfig, synth_batch

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # Global-norm gradient clipping; None disables it.
    max_grad_norm: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError(f"max_grad_norm must be positive, got {self.max_grad_norm}")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    aux_loss: float
    # Tokens each expert processed this step, after capacity drops.
    expert_counts: tuple[int, ...]
    drop_fraction: float

    @property
    def max_expert_load(self) -> int:
        return max(self.expert_counts) if self.expert_counts else 0


def parse_mode(mode: str) -> Optional[float]:
    """'dropless' -> DROPLESS; 'capacity:<cf>' -> cf."""
    if mode == "dropless":
        return DROPLESS
    prefix = "capacity:"
    if mode.startswith(prefix):
        try:
            cf = float(mode[len(prefix) :])
        except ValueError:
            raise ConfigError(f"bad capacity factor in mode {mode!r}") from None
        if not cf > 0:
            raise ConfigError(f"capacity factor must be positive in mode {mode!r}")
        return cf
    raise ConfigError(f"mode must be 'dropless' or 'capacity:<factor>', got {mode!r}")


def train_loop(
    model_config: MoEConfig,
    task_config: SynthTaskConfig,
    steps: int,
    capacity_factor: Optional[float] = DROPLESS,
    settings: TrainSettings = TrainSettings(),
    workers: Optional[int] = None,
) -> list[StepMetrics]:
    """Train for `steps` steps and return one metrics record per step."""
    if model_config.hidden_size != task_config.hidden_size:
        raise ConfigError(
            f"model hidden_size={model_config.hidden_size} does not match "
            f"task hidden_size={task_config.hidden_size}"
        )
    config = replace(model_config, capacity_factor=capacity_factor)
    rng = np.random.default_rng([task_config.seed, 7])
    params = init_weights(config, rng).as_dict()
    state = AdamState()
    history: list[StepMetrics] = []

    logger.info(
        "Training: steps=%d experts=%d top_k=%d mode=%s",
        steps,
        config.num_experts,
        config.top_k,
        "dropless" if config.is_dropless else f"capacity:{capacity_factor}",
    )
    for step in range(steps):
        x, target = synth_batch(task_config, step)
        weights = MoEWeights(**params)
        if config.is_dropless:
            y, cache = dmoe_forward(x, weights, config, workers=workers)
            dropped = 0.0
        else:
            y, cache, stats = moe_dropping_forward(x, weights, config, workers=workers)
            dropped = stats.overall

        residual = y - target
        loss = float(np.mean(residual * residual))
        aux_loss, aux_grad = load_balance_loss(cache.assignment, config)
        if not (math.isfinite(loss) and math.isfinite(aux_loss)):
            raise TrainingDiverged(step, loss + aux_loss)

        dy = 2.0 * residual / residual.size
        _, grads = dmoe_backward(dy, cache, weights, d_probs=aux_grad, workers=workers)
        grad_dict = grads.as_dict()
        if settings.max_grad_norm is not None:
            grad_dict, norm = clip_by_global_norm(grad_dict, settings.max_grad_norm)
            logger.debug("step=%d grad_norm=%.4g", step, norm)
        params, state = adam_step(
            params,
            grad_dict,
            state,
            lr=settings.lr,
            beta1=settings.beta1,
            beta2=settings.beta2,
            eps=settings.eps,
        )

        metrics = StepMetrics(
            step=step,
            loss=loss,
            aux_loss=aux_loss,
            expert_counts=tuple(int(c) for c in cache.plan.counts),
            drop_fraction=dropped,
        )
        history.append(metrics)
        logger.debug(
            "step=%d loss=%.6g aux=%.4g drop=%.3f loads=%s",
            step,
            loss,
            aux_loss,
            dropped,
            metrics.expert_counts,
        )

    if history:
        logger.info(
            "Training done: initial_loss=%.6g final_loss=%.6g",
            history[0].loss,
            history[-1].loss,
        )
    return history
