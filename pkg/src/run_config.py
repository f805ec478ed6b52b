"""JSON run configuration for `train`.

File layout (every section optional, every key a dataclass field name):

    {
      "model": {MoEConfig fields},
      "task":  {SynthTaskConfig fields},
      "train": {"lr", "beta1", "beta2", "eps", "max_grad_norm"}
    }

`capacity_factor` may be "dropless" or null for the DROPLESS sentinel. Unknown
sections or keys are a ConfigError naming the offending key.
"""

from __future__ import annotations

import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Union

from src.moe.config import DROPLESS, ConfigError, MoEConfig
from src.training.loop import TrainSettings
from src.training.synth import SynthTaskConfig

logger = logging.getLogger(__name__)

# Default config file location
DEFAULT_TRAIN_CONFIG = Path(__file__).parent.parent / "config" / "toy_train.json"

_SECTIONS = {"model": MoEConfig, "task": SynthTaskConfig, "train": TrainSettings}


def _build(section: str, cls: type, values: Any) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key} (allowed: {sorted(allowed)})")
    values = dict(values)
    if values.get("capacity_factor") == "dropless":
        values["capacity_factor"] = DROPLESS
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad value in section {section!r}: {e}") from None


def parse_train_config(data: Any) -> tuple[MoEConfig, SynthTaskConfig, TrainSettings]:
    if not isinstance(data, dict):
        raise ConfigError("train config must be a JSON object")
    for section in data:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown key {section} (allowed: {sorted(_SECTIONS)})")

    model = data.get("model")
    if model is None:
        raise ConfigError("train config needs a 'model' section")
    task = data.get("task", {})
    # The task's feature size follows the model unless set explicitly.
    if isinstance(task, dict) and isinstance(model, dict) and "hidden_size" in model:
        task = {"hidden_size": model["hidden_size"], **task}

    return (
        _build("model", MoEConfig, model),
        _build("task", SynthTaskConfig, task),
        _build("train", TrainSettings, data.get("train", {})),
    )


def load_train_config(
    path: Union[str, Path, None] = None,
) -> tuple[MoEConfig, SynthTaskConfig, TrainSettings]:
    """Read and validate a train config; ConfigError names the path on failure."""
    path = Path(path) if path else DEFAULT_TRAIN_CONFIG
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    result = parse_train_config(data)
    logger.debug("Loaded train config from %s", path)
    return result
